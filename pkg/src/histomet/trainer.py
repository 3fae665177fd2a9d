"""Adam training with early stopping, patient-level cross-validation, gradient checks and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pipeline
from .model import ModelConfig, ModelParams, init_params, loss_and_grads, forward_slide
from .splits import fold_roles, make_folds  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

MODULE_CLASSES = {"a": 2, "b": 4}


def sub_seed(root, name):
    """Named child seed so each consumer of randomness is independently reproducible."""
    return int(np.random.SeedSequence([int(root), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lambda_compact: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    fold_count: int = 5
    no_condensation: bool = False
    no_concept_alignment: bool = False
    no_class_prompts: bool = False
    single_scale: str | None = None
    prototype_count: int = 16
    concept_count: int = 8
    temperature: float = 10.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.max_epochs > 0 and self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.fold_count < 2:
            raise ValueError("fold_count must be >= 2")
        if self.single_scale not in (None, "10x", "20x"):
            raise ValueError("single_scale must be None, '10x' or '20x'")

    def model_config(self, feature_dim, module):
        return ModelConfig(
            feature_dim=feature_dim,
            n_classes=MODULE_CLASSES[module],
            prototypes=self.prototype_count,
            concepts=self.concept_count,
            temperature=self.temperature,
            scales=(self.single_scale,) if self.single_scale else ("10x", "20x"),
            condensation=not self.no_condensation,
            concept_alignment=not self.no_concept_alignment,
            class_prompts=not self.no_class_prompts,
        )


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays):
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params, grads, state: AdamState, lr):
    """Bias-corrected Adam update, applied in place in sorted-name order. Returns (params, state)."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape or state.m[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def total_loss(logits, label, compactness, lambda_compact):
    """Softmax cross-entropy plus the weighted (multi-scale summed) compactness term."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} outside [0, {logits.shape[0]})")
    shifted = logits - logits.max()
    xent = math.log(np.exp(shifted).sum()) - shifted[label]
    return float(xent + lambda_compact * compactness)


def module_targets(slides, module):
    """Slides and integer targets for a module: A is metastatic vs not, B is the site among metastatic slides."""
    if module == "a":
        return list(slides), [int(s.label > 0) for s in slides]
    if module == "b":
        kept = [s for s in slides if s.label > 0]
        return kept, [s.label - 1 for s in kept]
    raise ValueError(f"unknown module {module!r}")


def module_metrics(probs, targets, module):
    """ACC, macro-F1 and AUC (binary AUC for A, one-vs-rest macro AUC for B)."""
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    n_cls = MODULE_CLASSES[module]
    pred = probs.argmax(axis=1)
    out = {"acc": float((pred == targets).mean()), "macro_f1": pipeline.macro_f1(pred, targets, n_cls)}
    if np.unique(targets).size >= 2:
        if module == "a":
            out["auc"] = pipeline.roc_auc(probs[:, 1], targets == 1)
        else:
            out["auc"] = pipeline.ovr_macro_auc(probs, targets, n_cls)
    else:
        out["auc"] = math.nan
    return out


@dataclass
class FitResult:
    params: ModelParams
    log: list
    best_epoch: int | None = None


def fit(train_slides, val_slides, config: TrainConfig, module, feature_dim=None, log_path=None):
    """Train one module; return the parameters of the best-validation-loss epoch.

    One slide per optimizer step, slides visited in a seeded shuffled order.
    Without validation slides the training loss drives early stopping.
    """
    train, y_train = module_targets(train_slides, module)
    val, y_val = module_targets(val_slides, module)
    if not train:
        raise ValueError(f"empty training split for module {module}")
    n_cls = MODULE_CLASSES[module]
    missing = sorted(set(range(n_cls)) - set(y_train))
    if missing:
        warnings.warn(f"module {module}: classes {missing} absent from the training split", stacklevel=2)
    if feature_dim is None:
        feature_dim = next(iter(train[0].bags.values())).shape[1]
    params = init_params(config.model_config(feature_dim, module), seed=sub_seed(config.seed, "init"))
    state = AdamState.zeros_like(params.arrays)
    order_rng = np.random.default_rng(sub_seed(config.seed, "order"))
    best, best_loss, best_epoch, stale = params.copy(), math.inf, None, 0
    history = []
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.max_epochs):
            losses = []
            for i in order_rng.permutation(len(train)):
                loss, grads, _ = loss_and_grads(params, train[i].bags, y_train[i], config.lambda_compact)
                adam_step(params.arrays, grads, state, config.learning_rate)
                losses.append(loss)
            entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": None, "val_auc": None}
            if val:
                vloss, vprobs = [], []
                for s, y in zip(val, y_val):
                    loss, _, fwd = loss_and_grads(params, s.bags, y, config.lambda_compact, need_grads=False)
                    vloss.append(loss)
                    vprobs.append(fwd.probs)
                entry["val_loss"] = float(np.mean(vloss))
                auc = module_metrics(vprobs, y_val, module)["auc"]
                entry["val_auc"] = None if math.isnan(auc) else auc
            history.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
            monitor = entry["val_loss"] if val else entry["train_loss"]
            log.debug("module %s epoch %d: %s", module, epoch, entry)
            if monitor < best_loss:
                best, best_loss, best_epoch, stale = params.copy(), monitor, epoch, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if sink:
            sink.close()
    return FitResult(best, history, best_epoch)


def predict(slides, params):
    return np.array([forward_slide(s.bags, params).probs for s in slides])


# --------------------------------------------------------------------------
# gradient check


GRADCHECK_FLOOR = 1e-5


def grad_check(params: ModelParams, bags, label, lambda_compact=1e-3, step=1e-5, break_gradient=False,
               floor=GRADCHECK_FLOOR):
    """Max relative error of analytic vs central-difference gradients, per learnable array.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. The floor
    keeps central-difference roundoff (about eps * |loss| / step, ~1e-11) on
    near-zero entries from reading as a large relative error. Frozen
    embeddings are not perturbed and do not appear in the report.
    """
    _, grads, _ = loss_and_grads(params, bags, label, lambda_compact)
    if break_gradient:
        first = params.names()[0]
        grads[first] = grads[first].copy()
        grads[first].flat[0] += 1.0
    report = {}
    for name in params.names():
        arr = params.arrays[name]
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_and_grads(params, bags, label, lambda_compact, need_grads=False)[0]
            arr[idx] = orig - step
            down = loss_and_grads(params, bags, label, lambda_compact, need_grads=False)[0]
            arr[idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        analytic = grads[name]
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        report[name] = float((np.abs(analytic - numeric) / denom).max())
    return report


def gradcheck_instance(seed=0, prototypes=4, bag_size=16, dim=8, concepts=3, classes=4):
    """A seeded tiny two-scale model and bag pair for gradient checking."""
    cfg = ModelConfig(feature_dim=dim, n_classes=classes, prototypes=prototypes, concepts=concepts)
    params = init_params(cfg, seed=sub_seed(seed, "gradcheck/init"))
    rng = np.random.default_rng(sub_seed(seed, "gradcheck/bags"))
    bags = {s: rng.normal(size=(bag_size, dim)) for s in ("10x", "20x")}
    label = int(rng.integers(classes))
    return params, bags, label


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"HMCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHHI")


def save_checkpoint(params: ModelParams, path, meta=None):
    """Binary checkpoint: fixed header, JSON shape table, then float64 little-endian payloads."""
    entries = [(n, params.arrays[n], False) for n in sorted(params.arrays)]
    entries += [(n, params.frozen[n], True) for n in sorted(params.frozen)]
    header = {
        "model": params.config.to_dict(),
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(a.shape), "frozen": f} for n, a, f in entries],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, 0, len(blob)))
        fh.write(blob)
        for _, a, _ in entries:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEAD.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, _, n = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_CKPT_HEAD.size:_CKPT_HEAD.size + n])
    off = _CKPT_HEAD.size + n
    arrays, frozen = {}, {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if off + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated payload at {e['name']}")
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(e["shape"]).astype(np.float64)
        off += 8 * count
        (frozen if e["frozen"] else arrays)[e["name"]] = a
    return ModelParams(ModelConfig(**header["model"]), arrays, frozen), header["meta"]


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    params: ModelParams
    log: list
    best_epoch: int | None
    test_metrics: dict
    val_metrics: dict = field(default_factory=dict)


def split_by_fold(slides, fold, k):
    train_f, val_f, test_f = fold_roles(fold, k)
    train = [s for s in slides if s.fold in train_f]
    val = [s for s in slides if s.fold == val_f]
    test = [s for s in slides if s.fold == test_f]
    return train, val, test


def run_fold(slides, fold, config: TrainConfig, module, out_dir=None):
    train, val, test = split_by_fold(slides, fold, config.fold_count)
    fold_cfg = replace(config, seed=sub_seed(config.seed, f"fold{fold}"))
    log_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / f"epochs_module_{module}.jsonl"
    res = fit(train, val, fold_cfg, module, log_path=log_path)
    metrics = {}
    for name, part in (("test", test), ("val", val)):
        kept, y = module_targets(part, module)
        metrics[name] = module_metrics(predict(kept, res.params), y, module) if kept else {}
    if out_dir is not None:
        save_checkpoint(res.params, Path(out_dir) / f"module_{module}.hmck",
                        meta={"fold": fold, "module": module, "best_epoch": res.best_epoch})
    return FoldResult(fold, res.params, res.log, res.best_epoch, metrics["test"], metrics["val"])


def _run_fold_args(args):
    return run_fold(*args)


def cross_validate(slides, config: TrainConfig, module, out_dir=None, workers=1):
    """Train one module on every fold. Folds are independent, so `workers > 1` runs them in processes."""
    k = config.fold_count
    jobs = [(slides, f, config, module, None if out_dir is None else Path(out_dir) / f"fold{f}") for f in range(k)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_fold_args, jobs))
    else:
        results = [run_fold(*j) for j in jobs]
    return results, summarize(results)


def summarize(results):
    """Mean and population standard deviation across folds for each test metric."""
    keys = sorted({k for r in results for k in r.test_metrics})
    out = {}
    for k in keys:
        vals = np.array([r.test_metrics[k] for r in results if k in r.test_metrics], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[k] = {"mean": float(vals.mean()) if vals.size else math.nan,
                  "std": float(vals.std()) if vals.size else math.nan,
                  "folds": [r.test_metrics.get(k) for r in results]}
    return out


def config_dict(config: TrainConfig):
    return asdict(config)


__all__ = [
    "AdamState", "FitResult", "FoldResult", "TrainConfig", "adam_step", "config_dict", "cross_validate",
    "fit", "grad_check", "gradcheck_instance", "load_checkpoint", "make_folds", "module_metrics",
    "module_targets", "predict", "run_fold", "save_checkpoint", "sub_seed", "summarize", "total_loss",
]
