"""Operating-point selection, two-stage gating and decision-aware metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import LABELS

DEFAULT_TARGETS = (0.95, 0.90, 0.80, 0.70)


@dataclass
class OperatingPoint:
    target_sensitivity: float
    threshold: float
    achieved_validation_sensitivity: float
    achieved_validation_specificity: float


@dataclass
class ConfusionFlow:
    true_negative: int
    false_negative: int
    true_positive: int
    false_positive: int

    @property
    def total(self):
        return self.true_negative + self.false_negative + self.true_positive + self.false_positive


def _binary(labels):
    labels = np.asarray(labels)
    return labels.astype(bool)


def _sens_spec(scores, labels, threshold):
    fwd = scores >= threshold
    pos, neg = labels, ~labels
    sens = float(fwd[pos].mean()) if pos.any() else math.nan
    spec = float((~fwd[neg]).mean()) if neg.any() else math.nan
    return sens, spec


def select_threshold(val_scores, val_labels, target):
    """Largest gate threshold whose validation sensitivity reaches `target`.

    Candidates are the distinct observed scores plus +inf; a case is forwarded
    when ``score >= threshold``. Sensitivity is non-increasing in the
    threshold, so the largest qualifying candidate also has the best
    specificity among qualifying candidates.
    """
    scores = np.asarray(val_scores, dtype=np.float64)
    labels = _binary(val_labels)
    if not labels.any():
        raise ValueError("validation set has no positive cases")
    if not 0 <= target <= 1:
        raise ValueError("target sensitivity must lie in [0, 1]")
    candidates = np.concatenate([np.unique(scores), [math.inf]])
    pos = np.sort(scores[labels])
    chosen = None
    for t in candidates[::-1]:
        hits = pos.size - np.searchsorted(pos, t, side="left")
        if hits / pos.size >= target:
            chosen = float(t)
            break
    sens, spec = _sens_spec(scores, labels, chosen)
    return OperatingPoint(float(target), chosen, sens, spec)


def gate(prob_metastatic, op: OperatingPoint):
    return bool(prob_metastatic >= op.threshold)


def roc_auc(scores, labels):
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary(labels)
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("roc_auc needs both classes")
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    # twice the pair count stays an exact integer
    doubled = int(2 * below.sum() + ties.sum())
    return doubled / 2 / (pos.size * neg.size)


def confusion_matrix(predictions, labels, class_count):
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    for y, p in zip(labels, predictions):
        cm[int(y), int(p)] += 1
    return cm


def per_class_prf(predictions, labels, class_count):
    """Rows of (precision, recall, f1, support, predicted) per class."""
    cm = confusion_matrix(predictions, labels, class_count)
    rows = []
    for c in range(class_count):
        tp = int(cm[c, c])
        support = int(cm[c].sum())
        predicted = int(cm[:, c].sum())
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * tp / (support + predicted) if tp else 0.0
        rows.append({"precision": precision, "recall": recall, "f1": f1, "support": support, "predicted": predicted})
    return rows


def macro_f1(predictions, labels, class_count):
    """Mean per-class F1 over classes that have support or predictions."""
    if len(labels) == 0:
        raise ValueError("macro_f1 of an empty set")
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValueError("label out of range")
    rows = per_class_prf(predictions, labels, class_count)
    kept = [r["f1"] for r in rows if r["support"] or r["predicted"]]
    return float(np.mean(kept))


def ovr_auc_per_class(probabilities, labels, class_count):
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    out = {}
    for c in range(class_count):
        mask = labels == c
        if mask.any() and (~mask).any():
            out[c] = roc_auc(probabilities[:, c], mask)
    return out


def ovr_macro_auc(probabilities, labels, class_count):
    present = np.unique(np.asarray(labels))
    if present.size < 2:
        raise ValueError("one-vs-rest AUC needs at least two classes present")
    return float(np.mean(list(ovr_auc_per_class(probabilities, labels, class_count).values())))


def flow_rates(flow: ConfusionFlow):
    """Screening sensitivity/specificity and the forwarded/filtered workload shares."""
    pos = flow.true_positive + flow.false_negative
    neg = flow.true_negative + flow.false_positive
    forwarded = flow.true_positive + flow.false_positive
    total = flow.total
    return {
        "sensitivity": flow.true_positive / pos if pos else math.nan,
        "specificity": flow.true_negative / neg if neg else math.nan,
        "workload_forwarded_fraction": forwarded / total if total else math.nan,
        "workload_filtered_fraction": (total - forwarded) / total if total else math.nan,
    }


def calibration_bins(probs, outcomes, bins=10):
    """Equal-width bins over [0, 1]: count, mean predicted probability, observed frequency."""
    probs = np.asarray(probs, dtype=np.float64)
    outcomes = _binary(outcomes)
    idx = np.minimum((probs * bins).astype(int), bins - 1)
    out = []
    for b in range(bins):
        sel = idx == b
        n = int(sel.sum())
        out.append({
            "lower": b / bins,
            "upper": (b + 1) / bins,
            "count": n,
            "mean_confidence": float(probs[sel].mean()) if n else None,
            "empirical_frequency": float(outcomes[sel].mean()) if n else None,
        })
    return out


def conditional_site_accuracy(true_labels, forwarded, site_predictions):
    """Over truly metastatic slides: forwarded and site-correct, blocked cases count as wrong.

    Labels and site predictions use the 5-class indices (sites are 1..4).
    """
    true_labels = np.asarray(true_labels)
    meta = true_labels > 0
    if not meta.any():
        raise ValueError("no metastatic slides")
    correct = 0
    for y, f, s in zip(true_labels[meta], np.asarray(forwarded)[meta], np.asarray(site_predictions, dtype=object)[meta]):
        if f and s is not None and int(s) == int(y):
            correct += 1
    return correct / int(meta.sum())


# --------------------------------------------------------------------------
# end-to-end


@dataclass
class Decision:
    slide_id: str
    true_label: int
    module_a_prob: float
    forwarded: bool
    site_prediction: int | None  # 5-class index of Module B's site, None when blocked
    final_prediction: int


@dataclass
class EndToEndReport:
    target_sensitivity: float
    threshold: float
    flow: ConfusionFlow
    five_class_accuracy: float
    macro_f1: float
    module_a_sensitivity: float
    module_a_specificity: float
    workload_forwarded_fraction: float
    workload_filtered_fraction: float
    conditional_site_accuracy: float
    per_class: dict
    ovr_auc: dict
    ovr_macro_auc: float
    calibration: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def decide(slide_id, true_label, prob_a, site_probs, op: OperatingPoint):
    """Blocked slides become Primary; forwarded slides take Module B's argmax site."""
    fwd = gate(prob_a, op)
    site = int(np.argmax(site_probs)) + 1 if fwd else None
    return Decision(slide_id, int(true_label), float(prob_a), fwd, site, site if fwd else 0)


def report_from_decisions(decisions, op: OperatingPoint, five_class_probs=None):
    """Aggregate per-slide decisions; every scalar except the AUCs is recomputable from the log alone."""
    y = np.array([d.true_label for d in decisions])
    pred = np.array([d.final_prediction for d in decisions])
    fwd = np.array([d.forwarded for d in decisions])
    meta = y > 0
    flow = ConfusionFlow(
        true_negative=int((~meta & ~fwd).sum()),
        false_negative=int((meta & ~fwd).sum()),
        true_positive=int((meta & fwd).sum()),
        false_positive=int((~meta & fwd).sum()),
    )
    rates = flow_rates(flow)
    n_cls = len(LABELS)
    rows = per_class_prf(pred, y, n_cls)
    per_class = {LABELS[c]: rows[c] for c in range(n_cls)}
    aucs, macro_auc = {}, math.nan
    if five_class_probs is not None and np.unique(y).size >= 2:
        aucs = {LABELS[c]: v for c, v in ovr_auc_per_class(five_class_probs, y, n_cls).items()}
        macro_auc = float(np.mean(list(aucs.values())))
    cond = conditional_site_accuracy(y, fwd, [d.site_prediction for d in decisions]) if meta.any() else math.nan
    return EndToEndReport(
        target_sensitivity=op.target_sensitivity,
        threshold=op.threshold,
        flow=flow,
        five_class_accuracy=float((pred == y).mean()),
        macro_f1=macro_f1(pred, y, n_cls),
        module_a_sensitivity=rates["sensitivity"],
        module_a_specificity=rates["specificity"],
        workload_forwarded_fraction=rates["workload_forwarded_fraction"],
        workload_filtered_fraction=rates["workload_filtered_fraction"],
        conditional_site_accuracy=cond,
        per_class=per_class,
        ovr_auc=aucs,
        ovr_macro_auc=macro_auc,
        calibration=calibration_bins([d.module_a_prob for d in decisions], meta),
    )


def five_class_probs(prob_a, site_probs):
    """P(Primary) = 1 - p_A; P(site) = p_A * p_B(site)."""
    site_probs = np.asarray(site_probs, dtype=np.float64)
    return np.concatenate([[1.0 - prob_a], prob_a * site_probs])


def evaluate_e2e(slides, module_a_params, module_b_params, op: OperatingPoint):
    """Score every slide with both modules and gate at `op`. Returns ``(report, decisions)``."""
    from .model import forward_slide

    decisions, probs = [], []
    for s in slides:
        pa = float(forward_slide(s.bags, module_a_params).probs[1])
        pb = forward_slide(s.bags, module_b_params).probs
        decisions.append(decide(s.slide_id, s.label, pa, pb, op))
        probs.append(five_class_probs(pa, pb))
    return report_from_decisions(decisions, op, np.array(probs)), decisions


LOG_FIELDS = ("slide_id", "true_label", "module_a_prob", "forwarded", "site_prediction", "final_5class_prediction")


def write_decision_log(decisions, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for d in decisions:
            w.writerow([
                d.slide_id,
                LABELS[d.true_label],
                repr(d.module_a_prob),
                int(d.forwarded),
                LABELS[d.site_prediction] if d.site_prediction is not None else "",
                LABELS[d.final_prediction],
            ])


def read_decision_log(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            site = row["site_prediction"]
            out.append(Decision(
                row["slide_id"],
                LABELS.index(row["true_label"]),
                float(row["module_a_prob"]),
                row["forwarded"] == "1",
                LABELS.index(site) if site else None,
                LABELS.index(row["final_5class_prediction"]),
            ))
    return out


def write_report(report: EndToEndReport, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
