"""Concept alignment, concept pooling, prompt scoring and logit fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import NORM_EPS, Tape, l2_normalize_rows


@dataclass
class ConceptBank:
    concepts: np.ndarray  # M x L

    def __post_init__(self):
        if self.concepts.ndim != 2 or self.concepts.shape[0] < 1:
            raise ValueError("concepts must be M x L with M >= 1")


@dataclass
class ClassPromptBank:
    prompts: np.ndarray  # C x L
    temperature: float = 10.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def init_embeddings(rows, dim, rng):
    """Unit-Gaussian rows, l2-normalized."""
    return l2_normalize_rows(rng.normal(size=(rows, dim)))


def align_graph(tape: Tape, tokens, concepts):
    """Softmax over prototypes of token/concept cosine, then concept-weighted token sums.

    Returns ``(V, alpha)`` with V of shape M x L and alpha of shape P x M.
    """
    sim = tape.cosine_rows(tokens, concepts)  # P x M
    alpha = tape.transpose(tape.row_softmax(tape.transpose(sim)))
    v = tape.matmul(tape.transpose(alpha), tokens)
    return v, alpha


def prompt_logits_graph(tape: Tape, z, prompts, temperature):
    return tape.scale(tape.cosine_rows(z, prompts), temperature)


def align_concepts(tokens, bank: ConceptBank):
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != bank.concepts.shape[1]:
        raise ValueError(f"token width {tokens.shape} does not match concepts {bank.concepts.shape}")
    t = Tape()
    v, alpha = align_graph(t, t.const(tokens), t.const(bank.concepts))
    return v.value, alpha.value


def pool_concepts(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1:
        raise ValueError("need at least one concept row")
    return v.mean(axis=0)


def class_logits(z, bank: ClassPromptBank):
    """Temperature-scaled cosine between the slide embedding and each class prompt.

    A zero embedding gives all-zero logits; use `is_degenerate_embedding` to flag it.
    """
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != bank.prompts.shape[1]:
        raise ValueError("embedding and prompt widths differ")
    t = Tape()
    out = prompt_logits_graph(t, t.const(z), t.const(bank.prompts), bank.temperature)
    return out.value[0]


def is_degenerate_embedding(z):
    return float(np.linalg.norm(z)) <= NORM_EPS


def fuse_logits(low, high=None):
    if low is None:
        low, high = high, None
    if low is None:
        raise ValueError("no logits to fuse")
    low = np.asarray(low, dtype=np.float64)
    if high is None:
        return low.copy()
    high = np.asarray(high, dtype=np.float64)
    if low.shape != high.shape:
        raise ValueError(f"logit length mismatch: {low.shape} vs {high.shape}")
    return low + high
