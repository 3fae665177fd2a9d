"""
Operating points and error propagation
======================================

A screening threshold is picked on validation scores so that sensitivity
reaches a target. The two modules are then chained: blocked slides are
labelled Primary, forwarded ones get the site classifier's answer.
"""
import numpy as np

from histomet import pipeline
from histomet.pipeline import ConfusionFlow, flow_rates, select_threshold

rng = np.random.default_rng(0)
labels = rng.random(200) < 0.45
scores = np.clip(rng.normal(0.35 + 0.3 * labels, 0.15), 0, 1)

for target in pipeline.DEFAULT_TARGETS:
    op = select_threshold(scores, labels, target)
    print(f"target {target:.2f}: threshold {op.threshold:.3f}  "
          f"sensitivity {op.achieved_validation_sensitivity:.3f}  specificity {op.achieved_validation_specificity:.3f}")

# a large confusion flow, read as workload accounting
flow = ConfusionFlow(true_negative=1409, false_negative=168, true_positive=2836, false_positive=2444)
print({k: round(v, 4) for k, v in flow_rates(flow).items()})

# a hand-scripted end-to-end example
op = select_threshold(scores, labels, 0.9)
true = [0, 0, 2, 3, 1, 4]
prob_a = [0.1, 0.9, 0.8, 0.2, 0.95, 0.7]
site_probs = np.eye(4)[[0, 1, 1, 2, 0, 0]]
decisions = [pipeline.decide(f"S{i}", y, pa, pb, op) for i, (y, pa, pb) in enumerate(zip(true, prob_a, site_probs))]
report = pipeline.report_from_decisions(decisions, op)
print("final labels:", [d.final_prediction for d in decisions])
print("5-class accuracy", report.five_class_accuracy, "conditional site accuracy", report.conditional_site_accuracy)
