"""
Writing and reading a synthetic cohort
======================================

Bags are stored as small binary files next to a JSON-lines manifest.
Generation is a pure function of the config, so the same seed gives the
same bytes.
"""
import tempfile
from pathlib import Path

from histomet import GeneratorConfig, generate_cohort
from histomet.cohort import read_bag, read_manifest

config = GeneratorConfig(seed=7, feature_dim=16, counts={"Primary": 4, "Brain": 2, "Liver": 2})

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp)
    generate_cohort(config, out)
    records = read_manifest(out / "manifest.jsonl")
    for r in records:
        bag = read_bag(out / r.path_10x)
        print(r.slide_id, r.patient_id, r.label, "fold", r.fold, bag.features.shape, bag.features.dtype)
    print(sorted(p.name for p in (out / "bags").iterdir())[:4], "...")
