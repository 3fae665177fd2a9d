"""Patient-level k-fold assignment."""
from __future__ import annotations

import numpy as np


def make_folds(patients, k=5, seed=0):
    """Assign each patient to a fold in ``[0, k)``.

    `patients` is a sequence of ``(patient_id, label)`` pairs; repeated ids
    (multi-slide patients) keep the label of their first occurrence. When every
    label has at least `k` patients the assignment is stratified: patients are
    shuffled within each label, labels are laid end to end in sorted order and
    folds are dealt round-robin along that list. Otherwise one shuffled list is
    dealt round-robin. Fold sizes differ by at most one patient either way.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    label_of = {}
    for pid, label in patients:
        label_of.setdefault(pid, label)
    ids = sorted(label_of)
    if len(ids) < k:
        raise ValueError(f"{len(ids)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    by_label = {}
    for pid in ids:
        by_label.setdefault(label_of[pid], []).append(pid)
    if all(len(group) >= k for group in by_label.values()):
        order = []
        for label in sorted(by_label):
            group = by_label[label]
            order.extend(group[i] for i in rng.permutation(len(group)))
    else:
        order = [ids[i] for i in rng.permutation(len(ids))]
    return {pid: i % k for i, pid in enumerate(order)}


def fold_roles(fold, k):
    """Test fold is `fold`; the next fold (cyclically) is validation; the rest train."""
    val = (fold + 1) % k
    train = [f for f in range(k) if f not in (fold, val)]
    return train, val, fold
