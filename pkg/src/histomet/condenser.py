"""Prototype condensation: P learnable queries cross-attend over a bag of patch features."""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .kernel import Tape


@dataclass
class PrototypeBank:
    queries: np.ndarray  # P x L
    wq: np.ndarray  # L x L
    wk: np.ndarray
    wv: np.ndarray
    ln_gain: np.ndarray  # L
    ln_bias: np.ndarray

    def __post_init__(self):
        if self.queries.ndim != 2 or self.queries.shape[0] < 1:
            raise ValueError("queries must be P x L with P >= 1")

    @property
    def dim(self):
        return self.queries.shape[1]

    @classmethod
    def init(cls, prototypes, dim, rng):
        return cls(
            queries=init_queries(prototypes, dim, rng),
            wq=init_projection(dim, rng),
            wk=init_projection(dim, rng),
            wv=init_projection(dim, rng),
            ln_gain=np.ones(dim),
            ln_bias=np.zeros(dim),
        )


@dataclass
class CondenseOutput:
    tokens: np.ndarray  # P x L, post residual + layer norm
    attention: np.ndarray  # P x N


def init_queries(prototypes, dim, rng):
    return rng.normal(0.0, 1.0 / math.sqrt(dim), size=(prototypes, dim))


def init_projection(dim, rng):
    bound = 1.0 / math.sqrt(dim)
    return rng.uniform(-bound, bound, size=(dim, dim))


def check_bag(bag, dim):
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim != 2:
        raise ValueError(f"bag must be N x L, got shape {bag.shape}")
    if bag.shape[0] == 0:
        raise ValueError("empty bag")
    if bag.shape[1] != dim:
        raise ValueError(f"bag has {bag.shape[1]} columns, parameters expect {dim}")
    return bag


def condense_graph(tape: Tape, queries, wq, wk, wv, ln_gain, ln_bias, bag):
    """Record single-head cross-attention + residual layer norm on `tape`.

    Returns ``(tokens, attention)`` nodes.
    """
    dim = queries.value.shape[1]
    q = tape.matmul(queries, wq)
    k = tape.matmul(bag, wk)
    v = tape.matmul(bag, wv)
    scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(dim))
    attn = tape.row_softmax(scores)
    pooled = tape.matmul(attn, v)
    tokens = tape.layer_norm(tape.add(pooled, queries), ln_gain, ln_bias)
    return tokens, attn


def compactness_graph(tape: Tape, attn, bag, tokens, normalize=True):
    if normalize:
        bag = tape.l2_normalize_rows(bag)
        tokens = tape.l2_normalize_rows(tokens)
    return tape.attention_dispersion(attn, bag, tokens)


def condense(bank: PrototypeBank, bag) -> CondenseOutput:
    bag = check_bag(bag, bank.dim)
    t = Tape()
    c = t.const
    tokens, attn = condense_graph(
        t, c(bank.queries), c(bank.wq), c(bank.wk), c(bank.wv), c(bank.ln_gain), c(bank.ln_bias), c(bag)
    )
    return CondenseOutput(tokens=tokens.value, attention=attn.value)


def compactness_loss(out: CondenseOutput, bag, normalize=True) -> float:
    """Attention-weighted dispersion of instances around their prototype token, averaged over prototypes."""
    t = Tape()
    node = compactness_graph(t, t.const(out.attention), t.const(bag), t.const(out.tokens), normalize)
    return float(node.value)


def multiscale_compactness(losses) -> float:
    values = list(losses.values()) if isinstance(losses, Mapping) else list(losses)
    if not values:
        raise ValueError("at least one scale is required")
    return float(sum(values))
