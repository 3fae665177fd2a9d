"""Synthetic two-scale feature-bag cohorts, the HMFB bag format and JSONL manifests."""
from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .splits import make_folds

LABELS = ("Primary", "Brain", "LymphNode", "Liver", "SoftTissue")
SITES = LABELS[1:]
FULL_SCALE_COUNTS = {"Primary": 3854, "Brain": 266, "LymphNode": 2121, "Liver": 192, "SoftTissue": 425}
DESK_SCALE_COUNTS = {k: int(math.floor(v * 0.05 + 0.5)) for k, v in FULL_SCALE_COUNTS.items()}

BAG_MAGIC = b"HMFB"
BAG_VERSION = 1
_HEADER = struct.Struct("<4sHBBII")
MAG_CODES = {"10x": 1, "20x": 2}
FEATURE_CLAMP = 1e4


class BagFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class FeatureBag:
    magnification: str
    features: np.ndarray  # N x L float32
    coords: np.ndarray  # N x 2 int32

    def __post_init__(self):
        if self.magnification not in MAG_CODES:
            raise ValueError(f"unknown magnification {self.magnification!r}")
        self.features = np.asarray(self.features, dtype="<f4")
        self.coords = np.asarray(self.coords, dtype="<i4")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("a bag needs at least one instance")
        if self.coords.shape != (self.features.shape[0], 2):
            raise ValueError("coords must be N x 2")


def write_bag(bag: FeatureBag, path):
    n, dim = bag.features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BAG_MAGIC, BAG_VERSION, MAG_CODES[bag.magnification], 0, n, dim))
        fh.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bag.coords, dtype="<i4").tobytes())


def read_bag(path) -> FeatureBag:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise BagFormatError(f"{path}: truncated header")
    magic, version, code, _, n, dim = _HEADER.unpack_from(raw)
    if magic != BAG_MAGIC:
        raise BagFormatError(f"{path}: bad magic {magic!r}")
    if version != BAG_VERSION:
        raise BagFormatError(f"{path}: unsupported version {version}")
    mags = {v: k for k, v in MAG_CODES.items()}
    if code not in mags:
        raise BagFormatError(f"{path}: unknown magnification code {code}")
    if n == 0:
        raise BagFormatError(f"{path}: empty bag (N=0)")
    feat_bytes, coord_bytes = 4 * n * dim, 8 * n
    if len(raw) < _HEADER.size + feat_bytes + coord_bytes:
        raise BagFormatError(f"{path}: truncated payload, header declares {n}x{dim}")
    off = _HEADER.size
    features = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim).copy()
    coords = np.frombuffer(raw, dtype="<i4", count=2 * n, offset=off + feat_bytes).reshape(n, 2).copy()
    return FeatureBag(mags[code], features, coords)


# --------------------------------------------------------------------------
# manifest


@dataclass
class SlideRecord:
    slide_id: str
    patient_id: str
    label: str
    fold: int
    path_10x: str | None = None
    path_20x: str | None = None

    def path(self, scale):
        return self.path_10x if scale == "10x" else self.path_20x


def write_manifest(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_manifest(path, check_paths=True):
    path = Path(path)
    records, seen = [], {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                rec = SlideRecord(**raw)
            except (json.JSONDecodeError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if rec.label not in LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown label {rec.label!r}; expected one of {LABELS}")
            if rec.slide_id in seen:
                raise ManifestError(
                    f"{path}: duplicate slide_id {rec.slide_id!r} on lines {seen[rec.slide_id]} and {lineno}"
                )
            seen[rec.slide_id] = lineno
            if check_paths:
                for p in (rec.path_10x, rec.path_20x):
                    if p is not None and not (path.parent / p).exists():
                        raise ManifestError(f"{path}:{lineno}: missing bag file {p}")
            records.append(rec)
    return records


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class GeneratorConfig:
    seed: int = 0
    feature_dim: int = 512
    bag_size: tuple = (64, 256)
    counts: dict = field(default_factory=lambda: dict(DESK_SCALE_COUNTS))
    signal_fraction: float = 0.2
    noise_std: float = 1.0
    anchor_separation: float = 3.0
    cross_scale_correlation: float = 0.7
    multi_slide_fraction: float = 0.0
    scales: tuple = ("10x", "20x")
    fold_count: int = 5

    def validate(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        unknown = set(self.counts) - set(LABELS)
        if unknown:
            raise ValueError(f"unknown labels in counts: {sorted(unknown)}")
        if any(int(c) < 0 for c in self.counts.values()):
            raise ValueError("class counts must be non-negative")
        lo, hi = self.bag_size
        if not 1 <= lo <= hi:
            raise ValueError("bag_size must satisfy 1 <= min <= max")
        if not 0 < self.signal_fraction <= 1:
            raise ValueError("signal_fraction must lie in (0, 1]")
        if not 0 <= self.cross_scale_correlation <= 1:
            raise ValueError("cross_scale_correlation must lie in [0, 1]")
        if not 0 <= self.multi_slide_fraction <= 1:
            raise ValueError("multi_slide_fraction must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["bag_size"] = list(self.bag_size)
        d["scales"] = list(self.scales)
        return d


def _stream(seed, name, *extra):
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra]))


def signal_directions(config: GeneratorConfig):
    """Per-class anchor directions plus a shared metastasis signature (last row), unit norm.

    Orthonormal when ``feature_dim >= 6``.
    """
    raw = _stream(config.seed, "anchors").normal(size=(len(LABELS) + 1, config.feature_dim))
    if config.feature_dim >= raw.shape[0]:
        q, _ = np.linalg.qr(raw.T)
        return q.T.copy()
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _grid_coords(n, patch=256):
    side = math.ceil(math.sqrt(n))
    idx = np.arange(n)
    return np.stack([(idx % side) * patch, (idx // side) * patch], axis=1).astype(np.int32)


def synthesize_slide(config: GeneratorConfig, index, label, directions=None):
    """Bags for one slide, keyed by scale. Deterministic in (config, index)."""
    if directions is None:
        directions = signal_directions(config)
    rng = _stream(config.seed, "slide", index)
    lo, hi = config.bag_size
    n = int(rng.integers(lo, hi + 1))
    mask = rng.random(n) < config.signal_fraction
    if not mask.any():
        mask[int(rng.integers(n))] = True
    k = LABELS.index(label)
    mean = config.anchor_separation * directions[k]
    if k > 0:
        mean = mean + config.anchor_separation * directions[-1]
    latent = mask[:, None] * mean[None, :]
    e1 = rng.normal(scale=config.noise_std, size=(n, config.feature_dim))
    e2 = rng.normal(scale=config.noise_std, size=(n, config.feature_dim))
    rho = config.cross_scale_correlation
    raw = {"10x": latent + e1, "20x": latent + rho * e1 + math.sqrt(1.0 - rho * rho) * e2}
    coords = _grid_coords(n)
    return {
        s: FeatureBag(s, np.clip(raw[s], -FEATURE_CLAMP, FEATURE_CLAMP).astype("<f4"), coords)
        for s in config.scales
    }


def cohort_plan(config: GeneratorConfig):
    """Slide records (without paths) in generation order, folds assigned at patient level."""
    config.validate()
    draw = _stream(config.seed, "patients")
    records = []
    index = 0
    for label in LABELS:
        count = int(config.counts.get(label, 0))
        previous_solo = None
        for _ in range(count):
            sid = f"S{index:05d}"
            pid = f"P{index:05d}"
            share = draw.random() < config.multi_slide_fraction
            if share and previous_solo is not None:
                pid = previous_solo
                previous_solo = None
            else:
                previous_solo = pid
            records.append(SlideRecord(sid, pid, label, -1))
            index += 1
    if records:
        k = config.fold_count
        patients = [(r.patient_id, r.label) for r in records]
        if len({p for p, _ in patients}) >= k:
            folds = make_folds(patients, k, int(_stream(config.seed, "folds").integers(2**31)))
            for r in records:
                r.fold = folds[r.patient_id]
    return records


def generate_cohort(config: GeneratorConfig, out_dir):
    """Write bags under ``out_dir/bags`` plus ``manifest.jsonl`` and ``generator_config.json``."""
    out_dir = Path(out_dir)
    records = cohort_plan(config)
    directions = signal_directions(config)
    bag_dir = out_dir / "bags"
    if records:
        bag_dir.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        bags = synthesize_slide(config, i, rec.label, directions)
        for s, bag in bags.items():
            rel = os.path.join("bags", f"{rec.slide_id}_{s}.hmfb")
            write_bag(bag, out_dir / rel)
            setattr(rec, f"path_{s}", rel)
    write_manifest(records, out_dir / "manifest.jsonl")
    with open(out_dir / "generator_config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    return records


@dataclass
class Slide:
    """A slide ready for the model: float64 bags per scale and an integer 5-class label."""

    slide_id: str
    patient_id: str
    label: int
    fold: int
    bags: dict

    @property
    def metastatic(self):
        return self.label > 0


def load_slides(manifest_path, scales=("10x", "20x")):
    manifest_path = Path(manifest_path)
    slides = []
    for rec in read_manifest(manifest_path):
        bags = {}
        for s in scales:
            p = rec.path(s)
            if p is not None:
                bags[s] = read_bag(manifest_path.parent / p).features.astype(np.float64)
        slides.append(Slide(rec.slide_id, rec.patient_id, LABELS.index(rec.label), rec.fold, bags))
    return slides


def synthesize_slides(config: GeneratorConfig):
    """In-memory equivalent of `generate_cohort` followed by `load_slides`."""
    records = cohort_plan(config)
    directions = signal_directions(config)
    out = []
    for i, rec in enumerate(records):
        bags = synthesize_slide(config, i, rec.label, directions)
        out.append(Slide(rec.slide_id, rec.patient_id, LABELS.index(rec.label), rec.fold,
                         {s: b.features.astype(np.float64) for s, b in bags.items()}))
    return out
