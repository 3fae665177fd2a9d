"""Two-stage multiple-instance pipeline: metastasis screening, then conditional site prediction."""
from .cohort import LABELS, SITES, GeneratorConfig, generate_cohort, load_slides, synthesize_slides
from .model import ModelConfig, forward_slide, init_params
from .pipeline import evaluate_e2e, select_threshold
from .trainer import TrainConfig, cross_validate, fit

__version__ = "0.1.0"

__all__ = [
    "LABELS", "SITES", "GeneratorConfig", "ModelConfig", "TrainConfig", "cross_validate", "evaluate_e2e",
    "fit", "forward_slide", "generate_cohort", "init_params", "load_slides", "select_threshold",
    "synthesize_slides",
]
