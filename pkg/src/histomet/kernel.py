"""Dense float64 matrix primitives and a small reverse-mode tape.

The pure functions at the top operate on numpy arrays. `Tape` records the
same operations on `Var` nodes so that `backprop` can return analytic
gradients for every learnable leaf.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
NORM_EPS = 1e-12


def _as_matrix(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def matmul(a, b):
    """Matrix product with a fixed left-to-right accumulation over the inner index.

    Equal bit-for-bit to the naive triple loop ``s += a[i, k] * b[k, j]``.
    BLAS is avoided on purpose: its blocked/FMA kernels reorder the sum.
    """
    a = np.ascontiguousarray(_as_matrix(a, "a"))
    b = np.ascontiguousarray(_as_matrix(b, "b"))
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if b.shape[1] == 1:
        # einsum unrolls the inner loop when the output has one column;
        # a zero pad column keeps the column loop innermost.
        padded = np.concatenate([b, np.zeros_like(b)], axis=1)
        return np.einsum("ik,kj->ij", a, padded, optimize=False)[:, :1].copy()
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def row_softmax(x):
    x = _as_matrix(x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Per-row normalization with population variance, then affine gain/bias."""
    x = _as_matrix(x)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ValueError("gain and bias must have one entry per column")
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def l2_normalize_rows(x, eps=NORM_EPS):
    x = _as_matrix(x)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, eps)


def cosine_rows(a, b, eps=NORM_EPS):
    """Pairwise cosine similarity between rows of `a` and rows of `b`."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine_rows column mismatch: {a.shape[1]} vs {b.shape[1]}")
    return matmul(l2_normalize_rows(a, eps), l2_normalize_rows(b, eps).T)


# --------------------------------------------------------------------------
# reverse-mode tape


class Var:
    """A node on a `Tape`. `grad` is populated by `backprop`."""

    __slots__ = ("value", "grad", "name", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, name=None, requires_grad=False, parents=(), vjp=None):
        self.value = value
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label} shape={self.value.shape}"


class Tape:
    """Records operations in creation order, which is already topological."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def _push(self, value, parents, vjp):
        needs = any(p.requires_grad for p in parents)
        node = Var(value, requires_grad=needs, parents=parents if needs else (), vjp=vjp if needs else None)
        self.nodes.append(node)
        return node

    def param(self, value, name):
        v = Var(np.asarray(value, dtype=np.float64), name=name, requires_grad=True)
        self.leaves.append(v)
        return v

    def const(self, value):
        return Var(np.asarray(value, dtype=np.float64))

    # elementwise / structural -------------------------------------------

    def add(self, a, b):
        def vjp(g):
            return g, g
        return self._push(a.value + b.value, (a, b), vjp)

    def add_row(self, a, row):
        """Add a 1-D vector to every row of `a`."""
        def vjp(g):
            return g, g.sum(axis=0)
        return self._push(a.value + row.value, (a, row), vjp)

    def scale(self, a, c):
        def vjp(g):
            return (g * c,)
        return self._push(a.value * c, (a,), vjp)

    def transpose(self, a):
        def vjp(g):
            return (g.T,)
        return self._push(np.ascontiguousarray(a.value.T), (a,), vjp)

    def mean_rows(self, a):
        """Column-wise mean, giving a 1 x cols matrix."""
        n = a.value.shape[0]
        def vjp(g):
            return (np.broadcast_to(g / n, a.value.shape).copy(),)
        return self._push(a.value.mean(axis=0, keepdims=True), (a,), vjp)

    def total(self, a):
        def vjp(g):
            return (np.full(a.value.shape, float(g)),)
        return self._push(np.asarray(a.value.sum()), (a,), vjp)

    def sum_scalars(self, items, weights=None):
        weights = [1.0] * len(items) if weights is None else list(weights)
        value = np.asarray(sum(w * float(x.value) for w, x in zip(weights, items)))
        def vjp(g):
            return tuple(np.asarray(w * float(g)) for w in weights)
        return self._push(value, tuple(items), vjp)

    def inner(self, a, weights):
        """sum(a * weights) for a constant weight array."""
        w = np.asarray(weights, dtype=np.float64)
        def vjp(g):
            return (float(g) * w,)
        return self._push(np.asarray((a.value * w).sum()), (a,), vjp)

    def sq_norm(self, a):
        def vjp(g):
            return (2.0 * float(g) * a.value,)
        return self._push(np.asarray((a.value * a.value).sum()), (a,), vjp)

    # matrix ops ---------------------------------------------------------

    def matmul(self, a, b):
        def vjp(g):
            ga = matmul(g, b.value.T) if a.requires_grad else None
            gb = matmul(a.value.T, g) if b.requires_grad else None
            return ga, gb
        return self._push(matmul(a.value, b.value), (a, b), vjp)

    def row_softmax(self, a):
        y = row_softmax(a.value)
        def vjp(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)
        return self._push(y, (a,), vjp)

    def layer_norm(self, a, gain, bias, eps=LN_EPS):
        x = a.value
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * rstd
        y = xhat * gain.value + bias.value

        def vjp(g):
            gh = g * gain.value
            gx = rstd * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)
        return self._push(y, (a, gain, bias), vjp)

    def l2_normalize_rows(self, a, eps=NORM_EPS):
        x = a.value
        norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
        denom = np.maximum(norms, eps)
        y = x / denom
        live = norms > eps

        def vjp(g):
            radial = (g * y).sum(axis=1, keepdims=True)
            gx = np.where(live, (g - y * radial) / denom, g / denom)
            return (gx,)
        return self._push(y, (a,), vjp)

    def cosine_rows(self, a, b, eps=NORM_EPS):
        an = self.l2_normalize_rows(a, eps)
        bn = self.l2_normalize_rows(b, eps)
        return self.matmul(an, self.transpose(bn))

    def linear(self, x, w, b):
        return self.add_row(self.matmul(x, w), b)

    # losses -------------------------------------------------------------

    def softmax_xent(self, logits, label):
        """Cross-entropy of a 1 x C logit row against an integer label."""
        z = logits.value
        shifted = z - z.max()
        logsum = np.log(np.exp(shifted).sum())
        value = np.asarray(logsum - shifted[0, label])
        p = np.exp(shifted - logsum)

        def vjp(g):
            d = p.copy()
            d[0, label] -= 1.0
            return (float(g) * d,)
        return self._push(value, (logits,), vjp)

    def attention_dispersion(self, attn, inst, tok):
        """(1/P) sum_p sum_i attn[p, i] * ||inst[i] - tok[p]||^2."""
        A, M, H = attn.value, inst.value, tok.value
        P = A.shape[0]
        m2 = (M * M).sum(axis=1)
        h2 = (H * H).sum(axis=1)
        # squared distances via |m|^2 + |h|^2 - 2 h.m; clamp rounding below zero
        d = np.maximum(h2[:, None] + m2[None, :] - 2.0 * matmul(H, M.T), 0.0)
        value = np.asarray((A * d).sum() / P)

        def vjp(g):
            g = float(g)
            gA = g * d / P
            rows = A.sum(axis=1, keepdims=True)
            gM = None
            if inst.requires_grad:
                gM = (2.0 * g / P) * (A.sum(axis=0)[:, None] * M - matmul(A.T, H))
            gH = (2.0 * g / P) * (rows * H - matmul(A, M))
            return gA, gM, gH
        return self._push(value, (attn, inst, tok), vjp)


def backprop(tape, output, seed=1.0):
    """Accumulate d(output)/d(leaf) into every learnable leaf of `tape`.

    Returns ``{leaf.name: gradient}``. Raises if `output` is not a scalar.
    """
    if np.size(output.value) != 1:
        raise ValueError(f"backprop needs a scalar output, got shape {np.shape(output.value)}")
    grads = {id(output): np.asarray(seed, dtype=np.float64).reshape(np.shape(output.value))}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.value.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.value) if g is None else g
        out[leaf.name] = leaf.grad
    return out
