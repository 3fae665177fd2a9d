"""Slow, loop-based reference implementations used only by the tests.

These deliberately avoid the package's kernel so that they check it rather
than restate it.
"""
import math


def naive_matmul(a, b):
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            s = 0.0
            for k in range(inner):
                s += a[i][k] * b[k][j]
            out[i][j] = s
    return out


def transpose(a):
    return [list(col) for col in zip(*a)]


def softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    total = sum(e)
    return [x / total for x in e]


def layer_norm_row(row, gain, bias, eps=1e-5):
    n = len(row)
    mu = sum(row) / n
    var = sum((x - mu) ** 2 for x in row) / n
    return [(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gain, bias)]


def normalize(row, eps=1e-12):
    n = math.sqrt(sum(x * x for x in row))
    return [x / max(n, eps) for x in row]


def cosine(a, b):
    return sum(x * y for x, y in zip(normalize(a), normalize(b)))


def condense(queries, wq, wk, wv, gain, bias, bag):
    """Cross-attention of queries over bag rows, residual, layer norm; returns (tokens, attention)."""
    dim = len(queries[0])
    q = naive_matmul(queries, wq)
    k = naive_matmul(bag, wk)
    v = naive_matmul(bag, wv)
    attn = []
    for qp in q:
        scores = [sum(x * y for x, y in zip(qp, ki)) / math.sqrt(dim) for ki in k]
        attn.append(softmax(scores))
    tokens = []
    for p, ap in enumerate(attn):
        pooled = [sum(ap[i] * v[i][c] for i in range(len(bag))) for c in range(dim)]
        tokens.append(layer_norm_row([h + c for h, c in zip(pooled, queries[p])], gain, bias))
    return tokens, attn


def compactness(attn, bag, tokens, normalized=True):
    if normalized:
        bag = [normalize(r) for r in bag]
        tokens = [normalize(r) for r in tokens]
    total = 0.0
    for p, ap in enumerate(attn):
        for i, a in enumerate(ap):
            total += a * sum((x - y) ** 2 for x, y in zip(bag[i], tokens[p]))
    return total / len(attn)


def align(tokens, concepts):
    """Per-concept softmax over prototypes of cosine similarity; returns (V, alpha[p][m])."""
    P, M = len(tokens), len(concepts)
    alpha = [[0.0] * M for _ in range(P)]
    for m in range(M):
        w = softmax([cosine(tokens[p], concepts[m]) for p in range(P)])
        for p in range(P):
            alpha[p][m] = w[p]
    dim = len(tokens[0])
    v = [[sum(alpha[p][m] * tokens[p][c] for p in range(P)) for c in range(dim)] for m in range(M)]
    return v, alpha


def slide_logits(arrays, bags, temperature):
    """Full two-scale model evaluated step by step from a dict of parameter lists."""
    fused = None
    for s, bag in bags.items():
        tokens, _ = condense(arrays["queries"], arrays[f"{s}.wq"], arrays[f"{s}.wk"], arrays[f"{s}.wv"],
                             arrays[f"{s}.ln_gain"], arrays[f"{s}.ln_bias"], bag)
        v, _ = align(tokens, arrays[f"{s}.concepts"])
        z = [sum(col) / len(v) for col in zip(*v)]
        logits = [temperature * cosine(z, t) for t in arrays[f"{s}.prompts"]]
        fused = logits if fused is None else [a + b for a, b in zip(fused, logits)]
    return fused


def pair_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def sweep_thresholds(scores, labels):
    """(threshold, sensitivity, specificity) for every candidate threshold."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    out = []
    for t in sorted(set(scores)) + [math.inf]:
        sens = sum(p >= t for p in pos) / len(pos)
        spec = sum(n < t for n in neg) / len(neg) if neg else math.nan
        out.append((t, sens, spec))
    return out
