"""
Condensing a bag into prototype tokens and scoring it
=====================================================

One synthetic slide goes through an untrained two-scale model. We look at
where each prototype attends, how concepts weight the prototypes, and how
the per-scale logits add up to the fused decision.
"""
import numpy as np

from histomet import GeneratorConfig, ModelConfig, forward_slide, init_params, synthesize_slides
from histomet.cohort import SITES

np.set_printoptions(precision=3, suppress=True)

cohort = GeneratorConfig(seed=1, feature_dim=32, counts={"LymphNode": 1})
slide = synthesize_slides(cohort)[0]
print("bag sizes:", {s: b.shape for s, b in slide.bags.items()})

params = init_params(ModelConfig(feature_dim=32, n_classes=4, prototypes=8, concepts=4), seed=0)
fwd = forward_slide(slide.bags, params)

# each prototype's attention is a distribution over the patches of the bag
attn = fwd.attention["10x"]
print("attention rows sum to", attn.sum(axis=1))
print("most attended patch per prototype:", attn.argmax(axis=1))

# each concept spreads its weight over the prototypes
print("concept-by-prototype weights (20x):\n", fwd.alpha["20x"].T)

# fused logits are the sum of the scale logits
for s in fwd.scales:
    print(s, "logits", fwd.scale_logits[s])
print("fused", fwd.logits, "->", SITES[int(fwd.probs.argmax())], fwd.probs)
print("compactness per scale:", fwd.compactness)
