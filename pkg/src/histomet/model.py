"""Multi-scale prototype MIL model: condensation, concept alignment, prompt scoring, logit fusion."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import condenser, head
from .kernel import Tape, backprop, row_softmax

SCALES = ("10x", "20x")


@dataclass
class ModelConfig:
    feature_dim: int
    n_classes: int
    prototypes: int = 16
    concepts: int = 8
    temperature: float = 10.0
    scales: tuple = SCALES
    condensation: bool = True
    concept_alignment: bool = True
    class_prompts: bool = True
    normalize_compactness: bool = True

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if not self.scales or any(s not in SCALES for s in self.scales):
            raise ValueError(f"scales must be a non-empty subset of {SCALES}, got {self.scales}")
        if self.feature_dim < 1 or self.n_classes < 2:
            raise ValueError("feature_dim must be >= 1 and n_classes >= 2")
        if self.prototypes < 1 or self.concepts < 1:
            raise ValueError("prototypes and concepts must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def to_dict(self):
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


@dataclass
class ModelParams:
    """Learnable arrays keyed by name (``queries``, ``10x.wq`` ...) plus frozen embeddings."""

    config: ModelConfig
    arrays: dict
    frozen: dict = field(default_factory=dict)

    def get(self, name):
        return self.arrays[name] if name in self.arrays else self.frozen[name]

    def copy(self):
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.frozen.items()},
        )

    def names(self):
        return sorted(self.arrays)


def _named_rng(seed, name):
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_params(config: ModelConfig, seed=0, fixed_concepts=None, fixed_prompts=None):
    """Seeded initialization. Each array draws from its own name-derived stream,
    so ablation arms that share a parameter also share its initial value.

    `fixed_concepts` / `fixed_prompts` map scale -> matrix and are held frozen.
    """
    L, C = config.feature_dim, config.n_classes
    arrays, frozen = {}, {}
    if config.condensation:
        arrays["queries"] = condenser.init_queries(config.prototypes, L, _named_rng(seed, "queries"))
    for s in config.scales:
        if config.condensation:
            for w in ("wq", "wk", "wv"):
                arrays[f"{s}.{w}"] = condenser.init_projection(L, _named_rng(seed, f"{s}.{w}"))
            arrays[f"{s}.ln_gain"] = np.ones(L)
            arrays[f"{s}.ln_bias"] = np.zeros(L)
        if config.concept_alignment:
            if fixed_concepts is not None:
                frozen[f"{s}.concepts"] = np.asarray(fixed_concepts[s], dtype=np.float64)
            else:
                arrays[f"{s}.concepts"] = head.init_embeddings(config.concepts, L, _named_rng(seed, f"{s}.concepts"))
        if config.class_prompts:
            if fixed_prompts is not None:
                frozen[f"{s}.prompts"] = np.asarray(fixed_prompts[s], dtype=np.float64)
            else:
                arrays[f"{s}.prompts"] = head.init_embeddings(C, L, _named_rng(seed, f"{s}.prompts"))
        else:
            arrays[f"{s}.score_w"] = _named_rng(seed, f"{s}.score_w").uniform(-L**-0.5, L**-0.5, size=(L, C))
            arrays[f"{s}.score_b"] = np.zeros(C)
    return ModelParams(config, arrays, frozen)


@dataclass
class SlideForward:
    scales: list
    attention: dict  # scale -> P x N
    tokens: dict  # scale -> P x L
    alpha: dict  # scale -> P x M
    concept_tokens: dict  # scale -> M x L
    embedding: dict  # scale -> L
    scale_logits: dict  # scale -> C
    compactness: dict  # scale -> float
    logits: np.ndarray
    probs: np.ndarray
    diagnostics: list = field(default_factory=list)


def _present_scales(params, bags):
    present = [s for s in params.config.scales if bags.get(s) is not None]
    if not present:
        raise ValueError(f"no usable scale in bags (model uses {params.config.scales}, got {sorted(bags)})")
    return present


def build_graph(tape: Tape, params: ModelParams, bags):
    """Record the full slide forward on `tape`; returns a dict of graph nodes."""
    cfg = params.config
    leaf = {}

    def var(name):
        if name not in leaf:
            if name in params.arrays:
                leaf[name] = tape.param(params.arrays[name], name)
            else:
                leaf[name] = tape.const(params.frozen[name])
        return leaf[name]

    nodes = {"scales": _present_scales(params, bags), "per_scale": {}}
    scale_logits = []
    for s in nodes["scales"]:
        bag = tape.const(condenser.check_bag(bags[s], cfg.feature_dim))
        ns = {}
        if cfg.condensation:
            tokens, attn = condenser.condense_graph(
                tape, var("queries"), var(f"{s}.wq"), var(f"{s}.wk"), var(f"{s}.wv"),
                var(f"{s}.ln_gain"), var(f"{s}.ln_bias"), bag,
            )
            ns["attention"] = attn
            ns["compactness"] = condenser.compactness_graph(tape, attn, bag, tokens, cfg.normalize_compactness)
        else:
            tokens = bag
        ns["tokens"] = tokens
        if cfg.concept_alignment:
            v, alpha = head.align_graph(tape, tokens, var(f"{s}.concepts"))
            ns["alpha"], ns["concept_tokens"] = alpha, v
            z = tape.mean_rows(v)
        else:
            z = tape.mean_rows(tokens)
        ns["embedding"] = z
        if cfg.class_prompts:
            logits = head.prompt_logits_graph(tape, z, var(f"{s}.prompts"), cfg.temperature)
        else:
            logits = tape.linear(z, var(f"{s}.score_w"), var(f"{s}.score_b"))
        ns["logits"] = logits
        scale_logits.append(logits)
        nodes["per_scale"][s] = ns
    fused = scale_logits[0]
    for extra in scale_logits[1:]:
        fused = tape.add(fused, extra)
    nodes["logits"] = fused
    return nodes


def _to_forward(nodes, cfg):
    ps = nodes["per_scale"]
    logits = nodes["logits"].value[0].copy()
    diagnostics = []
    for s in nodes["scales"]:
        if head.is_degenerate_embedding(ps[s]["embedding"].value):
            diagnostics.append(f"zero-norm slide embedding at {s}; logits are zero")

    def grab(key, reshape=None):
        out = {}
        for s in nodes["scales"]:
            if key in ps[s]:
                val = ps[s][key].value
                out[s] = val[0].copy() if reshape == "row" else val.copy()
        return out

    return SlideForward(
        scales=list(nodes["scales"]),
        attention=grab("attention"),
        tokens=grab("tokens"),
        alpha=grab("alpha"),
        concept_tokens=grab("concept_tokens"),
        embedding=grab("embedding", "row"),
        scale_logits=grab("logits", "row"),
        compactness={s: float(ps[s]["compactness"].value) for s in nodes["scales"] if "compactness" in ps[s]},
        logits=logits,
        probs=row_softmax(logits[None, :])[0],
        diagnostics=diagnostics,
    )


def forward_slide(bags, params: ModelParams) -> SlideForward:
    """Run every present scale through the model and fuse the logits by summation."""
    tape = Tape()
    return _to_forward(build_graph(tape, params, bags), params.config)


def loss_and_grads(params: ModelParams, bags, label, lambda_compact, need_grads=True):
    """Cross-entropy on fused logits plus weighted multi-scale compactness.

    Returns ``(loss, grads, forward)``; grads maps every learnable name to its gradient.
    """
    if not 0 <= label < params.config.n_classes:
        raise ValueError(f"label {label} outside [0, {params.config.n_classes})")
    tape = Tape()
    nodes = build_graph(tape, params, bags)
    loss = tape.softmax_xent(nodes["logits"], label)
    comps = [nodes["per_scale"][s]["compactness"] for s in nodes["scales"] if "compactness" in nodes["per_scale"][s]]
    if comps and lambda_compact != 0:
        loss = tape.sum_scalars([loss] + comps, [1.0] + [lambda_compact] * len(comps))
    grads = {}
    if need_grads:
        grads = backprop(tape, loss)
        for name in params.arrays:
            grads.setdefault(name, np.zeros_like(params.arrays[name]))
    return float(loss.value), grads, _to_forward(nodes, params.config)


def export_interpretation(fwd: SlideForward, path, top_k=5, slide_id=None):
    """Write concept and prototype attention plus top-k patch indices per prototype as JSON."""
    record = {"slide_id": slide_id, "scales": {}}
    for s in fwd.scales:
        entry = {
            "logits": fwd.scale_logits[s].tolist(),
            "concept_attention": fwd.alpha[s].tolist() if s in fwd.alpha else None,
        }
        if s in fwd.attention:
            attn = fwd.attention[s]
            k = min(top_k, attn.shape[1])
            order = np.argsort(-attn, axis=1, kind="stable")[:, :k]
            entry["prototype_attention"] = attn.tolist()
            entry["top_patches"] = order.tolist()
        record["scales"][s] = entry
    record["fused_logits"] = fwd.logits.tolist()
    record["probabilities"] = fwd.probs.tolist()
    with open(path, "w") as fh:
        json.dump(record, fh)
    return record
