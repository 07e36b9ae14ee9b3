"""Synthetic long-tailed datasets with controllable label noise.

Each sample is built from three additive parts: a class direction (the
signal), a context direction drawn from a per-class affinity row (the
nuisance that can correlate with classes), and isotropic Gaussian noise.
Two corruptions are supported:

* blue noise: the feature vector is kept, the observed label is resampled
  uniformly from the other classes (closed-set annotation error);
* red noise: the observed label is kept, the features are regenerated from
  a direction orthogonal to every class direction (open-set content that
  only shares the class's modal context).

Class and context directions are drawn as one orthonormal frame, so the
context part of a sample never projects onto any class direction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import DomainError, ShapeError

# clean_label for open-set (red) records: the true content is outside the
# label space, so no in-taxonomy class applies.
OPEN_SET_LABEL = -1

NOISE_KINDS = ("none", "blue", "red")

CSV_FIXED_COLUMNS = ("sample_id", "observed_label", "clean_label",
                     "is_noise", "noise_kind", "context_id")

FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    """Generation parameters are invalid or mutually inconsistent."""


class ParseError(ValueError):
    """A dataset file is malformed; the message names the offending line."""


@dataclass(frozen=True)
class GenerativeSpec:
    """Fixed generative layout: directions, affinity, and scales."""

    class_count: int
    context_count: int
    feature_dim: int
    class_directions: np.ndarray    # (C, d) unit rows
    context_directions: np.ndarray  # (K, d) unit rows
    context_affinity: np.ndarray    # (C, K) row-stochastic
    signal_scale: float = 1.0
    context_scale: float = 1.0
    noise_scale: float = 0.5

    def __post_init__(self):
        C, K, d = self.class_count, self.context_count, self.feature_dim
        if C < 1 or K < 1 or d < 1:
            raise ConfigError("class_count, context_count, feature_dim must be positive")
        if self.class_directions.shape != (C, d):
            raise ShapeError(f"class_directions must be ({C}, {d})")
        if self.context_directions.shape != (K, d):
            raise ShapeError(f"context_directions must be ({K}, {d})")
        if self.context_affinity.shape != (C, K):
            raise ShapeError(f"context_affinity must be ({C}, {K})")
        for name, dirs in (("class", self.class_directions),
                           ("context", self.context_directions)):
            norms = np.linalg.norm(dirs, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ConfigError(f"{name}_directions rows must be unit length")
        if np.any(self.context_affinity < 0):
            raise ConfigError("context_affinity must be nonnegative")
        if np.any(np.abs(self.context_affinity.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigError("context_affinity rows must sum to 1")
        for name in ("signal_scale", "context_scale", "noise_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and nonnegative")


def make_generative_spec(class_count: int, context_count: int, feature_dim: int,
                         rng: np.random.Generator,
                         signal_scale: float = 1.0, context_scale: float = 1.0,
                         noise_scale: float = 0.5,
                         head_context_entropy: float = 0.9,
                         tail_context_entropy: float = 0.1) -> GenerativeSpec:
    """Draw directions and build the per-class context affinity.

    Class and context directions come from one random orthonormal frame
    (QR of a Gaussian matrix), which needs feature_dim >= C + K. Context
    affinity rows interpolate between a peaked row (entropy knob 0: all
    mass on the class's preferred context) and the uniform row (knob 1),
    linearly from head class 0 to tail class C-1. Preferred contexts are
    assigned round robin.
    """
    C, K, d = class_count, context_count, feature_dim
    if d < C + K:
        raise ConfigError(f"feature_dim must be >= class_count + context_count "
                          f"({C} + {K}) to draw an orthonormal frame, got {d}")
    for name, v in (("head_context_entropy", head_context_entropy),
                    ("tail_context_entropy", tail_context_entropy)):
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1]")

    q, _ = np.linalg.qr(rng.standard_normal((d, C + K)))
    class_dirs = q[:, :C].T.copy()
    context_dirs = q[:, C:].T.copy()

    affinity = np.empty((C, K))
    for c in range(C):
        frac = c / (C - 1) if C > 1 else 0.0
        spread = head_context_entropy + (tail_context_entropy - head_context_entropy) * frac
        row = np.full(K, spread / K)
        row[c % K] += 1.0 - spread
        affinity[c] = row

    return GenerativeSpec(C, K, d, class_dirs, context_dirs, affinity,
                          signal_scale, context_scale, noise_scale)


@dataclass
class SampleRecord:
    sample_id: int
    features: np.ndarray
    observed_label: int
    clean_label: int
    is_noise: bool = False
    noise_kind: str = "none"
    context_id: int = -1


def longtail_counts(class_count: int, n_max: int, imbalance: float) -> np.ndarray:
    """Per-class sizes decaying geometrically from n_max by a max/min ratio.

    n_c = round(n_max * imbalance^(-c/(C-1))) for c = 0..C-1, rounded half up.
    imbalance 1 gives a flat profile.
    """
    if class_count < 1:
        raise ConfigError("class_count must be positive")
    if imbalance < 1.0:
        raise ConfigError("imbalance ratio must be >= 1")
    if n_max < 1:
        raise ConfigError("n_max must be positive")
    if imbalance > 1.0 and class_count < 2:
        raise ConfigError("an imbalanced profile needs at least 2 classes")
    if class_count == 1:
        return np.array([n_max])
    exponents = -np.arange(class_count) / (class_count - 1)
    raw = n_max * np.power(imbalance, exponents)
    counts = np.floor(raw + 0.5).astype(int)
    if counts[-1] < 1:
        raise ConfigError(f"smallest class would be empty: n_max/imbalance = "
                          f"{n_max / imbalance:.3f} rounds below 1")
    return counts


def sample_clean(spec: GenerativeSpec, counts: Sequence[int],
                 rng: np.random.Generator) -> list[SampleRecord]:
    """Draw counts[c] clean records per class, ids sequential from 0."""
    counts = np.asarray(counts, dtype=int)
    if counts.shape != (spec.class_count,):
        raise ShapeError("counts must have one entry per class")
    if np.any(counts < 0):
        raise ConfigError("counts must be nonnegative")
    records = []
    sid = 0
    for c in range(spec.class_count):
        n = int(counts[c])
        if n == 0:
            continue
        ctx = rng.choice(spec.context_count, size=n, p=spec.context_affinity[c])
        eps = rng.standard_normal((n, spec.feature_dim))
        feats = (spec.signal_scale * spec.class_directions[c]
                 + spec.context_scale * spec.context_directions[ctx]
                 + spec.noise_scale * eps)
        for i in range(n):
            records.append(SampleRecord(sid, feats[i], c, c, False, "none", int(ctx[i])))
            sid += 1
    return records


def inject_blue_noise(records: list[SampleRecord], rate: float,
                      rng: np.random.Generator, class_count: int) -> list[SampleRecord]:
    """Flip floor(rate * n_c) observed labels per class to a uniform other class.

    Classes are keyed by clean label (every input record must still be
    clean). Features and clean labels are untouched. Returns new records;
    the inputs are not mutated.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError("blue noise rate must lie in [0, 1)")
    if any(r.is_noise for r in records):
        raise ConfigError("blue noise must be injected into clean records")
    out = [replace(r) for r in records]
    if rate == 0.0 or class_count < 2:
        return out
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(out):
        by_class.setdefault(r.clean_label, []).append(i)
    for c in sorted(by_class):
        idx = np.array(by_class[c])
        n_flip = int(math.floor(rate * len(idx)))
        if n_flip == 0:
            continue
        chosen = rng.choice(idx, size=n_flip, replace=False)
        draws = rng.integers(0, class_count - 1, size=n_flip)
        for i, draw in zip(chosen, draws):
            new_label = int(draw) + (1 if draw >= c else 0)
            out[i] = replace(out[i], observed_label=new_label,
                             is_noise=True, noise_kind="blue")
    return out


def inject_red_noise(spec: GenerativeSpec, records: list[SampleRecord],
                     rate: float, rng: np.random.Generator) -> list[SampleRecord]:
    """Replace floor(rate * n_c) clean records per class with open-set content.

    n_c counts records whose clean label is c, so the quota is taken from
    the original class size even after blue noise has claimed its share.
    A replaced record keeps its observed label, gets clean_label set to the
    open-set value, and has features rebuilt from a fresh unit direction
    orthogonalized against every class direction plus the class's modal
    context direction. Needs feature_dim > class_count, otherwise there is
    no direction left to draw from.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError("red noise rate must lie in [0, 1)")
    if rate > 0.0 and spec.feature_dim <= spec.class_count:
        raise ConfigError("red noise needs feature_dim > class_count to "
                          "orthogonalize against all class directions")
    out = [replace(r) for r in records]
    if rate == 0.0:
        return out
    dirs = spec.class_directions
    by_clean: dict[int, list[int]] = {}
    for i, r in enumerate(out):
        if 0 <= r.clean_label < spec.class_count:
            by_clean.setdefault(r.clean_label, []).append(i)
    for c in sorted(by_clean):
        group = by_clean[c]
        quota = int(math.floor(rate * len(group)))
        candidates = np.array([i for i in group if not out[i].is_noise])
        if quota == 0:
            continue
        if quota > len(candidates):
            raise ConfigError(f"class {c}: red quota {quota} exceeds the "
                              f"{len(candidates)} clean records left")
        chosen = rng.choice(candidates, size=quota, replace=False)
        modal_ctx = int(np.argmax(spec.context_affinity[c]))
        for i in chosen:
            u = _open_set_direction(dirs, rng)
            eps = rng.standard_normal(spec.feature_dim)
            feats = (spec.signal_scale * u
                     + spec.context_scale * spec.context_directions[modal_ctx]
                     + spec.noise_scale * eps)
            out[i] = replace(out[i], features=feats, clean_label=OPEN_SET_LABEL,
                             is_noise=True, noise_kind="red", context_id=modal_ctx)
    return out


def _open_set_direction(class_dirs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit vector with zero projection onto every class direction."""
    # Rows of class_dirs need not be mutually orthogonal, so project onto
    # their span via least squares rather than row-by-row Gram-Schmidt.
    pinv = np.linalg.pinv(class_dirs)
    while True:
        g = rng.standard_normal(class_dirs.shape[1])
        resid = g - class_dirs.T @ (pinv.T @ g)
        norm = np.linalg.norm(resid)
        if norm > 1e-9:
            return resid / norm


@dataclass
class DatasetBundle:
    """A train/test pair plus observed class counts and the class prior."""

    train: list[SampleRecord]
    test: list[SampleRecord]
    class_counts: np.ndarray
    prior: np.ndarray
    config: dict = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return len(self.class_counts)

    @property
    def feature_dim(self) -> int:
        return self.train[0].features.shape[0] if self.train else 0


def observed_counts(records: Sequence[SampleRecord], class_count: int) -> np.ndarray:
    counts = np.zeros(class_count, dtype=int)
    for r in records:
        counts[r.observed_label] += 1
    return counts


def build_bundle(spec: GenerativeSpec, n_max: int, imbalance: float,
                 noise_rate: float, blue_fraction: float, test_per_class: int,
                 rng: np.random.Generator, config: dict | None = None) -> DatasetBundle:
    """Assemble a full bundle: clean draw, blue then red noise, clean test.

    Noise splits as blue_fraction * noise_rate label flips and
    (1 - blue_fraction) * noise_rate open-set replacements, both per class
    against the original class size. Class counts and the prior are
    recomputed from observed labels after injection. The test set is
    balanced, clean, and draws its contexts uniformly so held-out accuracy
    measures class signal rather than context habits.
    """
    if not 0.0 <= noise_rate < 1.0:
        raise ConfigError("noise_rate must lie in [0, 1)")
    if not 0.0 <= blue_fraction <= 1.0:
        raise ConfigError("blue_fraction must lie in [0, 1]")
    if test_per_class < 0:
        raise ConfigError("test_per_class must be nonnegative")

    counts = longtail_counts(spec.class_count, n_max, imbalance)
    train = sample_clean(spec, counts, rng)
    train = inject_blue_noise(train, blue_fraction * noise_rate, rng, spec.class_count)
    train = inject_red_noise(spec, train, (1.0 - blue_fraction) * noise_rate, rng)

    uniform = np.full((spec.class_count, spec.context_count), 1.0 / spec.context_count)
    test_spec = replace(spec, context_affinity=uniform)
    test = sample_clean(test_spec, np.full(spec.class_count, test_per_class), rng)
    for i, r in enumerate(test):
        r.sample_id = len(train) + i

    obs = observed_counts(train, spec.class_count)
    bundle_config = dict(config or {})
    bundle_config.setdefault("noise_scale", spec.noise_scale)
    return DatasetBundle(train, test, obs, obs / obs.sum(), bundle_config)


def features_matrix(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.stack([r.features for r in records])


def labels_array(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.array([r.observed_label for r in records], dtype=int)


def ids_array(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.array([r.sample_id for r in records], dtype=int)


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".meta") if path.suffix else path.with_name(path.name + ".meta")


def _test_path(path: Path) -> Path:
    return path.with_suffix(".test.csv") if path.suffix else path.with_name(path.name + ".test.csv")


def write_csv(bundle: DatasetBundle, path) -> None:
    """Write train records, a balanced test sibling, and a key=value sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_records(bundle.train, path, bundle.feature_dim)
    _write_records(bundle.test, _test_path(path), bundle.feature_dim)
    cfg = bundle.config
    lines = [
        f"class_count={bundle.class_count}",
        f"feature_dim={bundle.feature_dim}",
        f"imbalance={cfg.get('imbalance', '')}",
        f"noise_rate={cfg.get('noise_rate', '')}",
        f"blue_fraction={cfg.get('blue_fraction', '')}",
        f"noise_scale={cfg.get('noise_scale', '')}",
        f"seed={cfg.get('seed', '')}",
        "class_counts=" + ",".join(str(int(c)) for c in bundle.class_counts),
    ]
    _sidecar_path(path).write_text("\n".join(lines) + "\n")


def _write_records(records: Sequence[SampleRecord], path: Path, dim: int) -> None:
    header = list(CSV_FIXED_COLUMNS) + [f"f{i}" for i in range(dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            writer.writerow([r.sample_id, r.observed_label, r.clean_label,
                             int(r.is_noise), r.noise_kind, r.context_id]
                            + [FLOAT_FMT % v for v in r.features])


def _read_sidecar(path: Path) -> dict:
    meta = {}
    if not path.exists():
        return meta
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path.name} line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def read_csv(path) -> DatasetBundle:
    """Read a dataset written by write_csv, or an external feature table.

    External tables need only feature columns f0..f{d-1} and a 'label'
    column; missing provenance fields default to clean (clean_label =
    observed_label, is_noise false). Labels at or above the declared class
    count are a parse error that names the row.
    """
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"no such dataset file: {path}")
    meta = _read_sidecar(_sidecar_path(path))
    declared_c = int(meta["class_count"]) if "class_count" in meta else None

    train = _read_records(path, declared_c)
    test_file = _test_path(path)
    test = _read_records(test_file, declared_c) if test_file.exists() else []

    labels_seen = [r.observed_label for r in train + test]
    class_count = declared_c if declared_c is not None else max(labels_seen) + 1
    counts = observed_counts(train, class_count)
    total = counts.sum()
    if total == 0:
        raise ParseError(f"{path.name}: no training rows")
    config = {k: v for k, v in meta.items() if k != "class_counts"}
    return DatasetBundle(train, test, counts, counts / total, config)


def _read_records(path: Path, class_count: int | None) -> list[SampleRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path.name} line 1: empty file") from None
        header = [h.strip() for h in header]
        full = tuple(header[:len(CSV_FIXED_COLUMNS)]) == CSV_FIXED_COLUMNS
        if full:
            feat_cols = list(range(len(CSV_FIXED_COLUMNS), len(header)))
            label_col = None
        else:
            # simple external schema: f0..f{d-1} plus one label column
            feat_cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
            feat_cols.sort(key=lambda i: int(header[i][1:]))
            label_cols = [i for i, h in enumerate(header) if h == "label"]
            if not feat_cols or len(label_cols) != 1:
                raise ParseError(f"{path.name} line 1: header must be either the "
                                 f"full record schema or f0..f{{d-1}} plus 'label'")
            label_col = label_cols[0]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path.name} line {lineno}: expected "
                                 f"{len(header)} fields, got {len(row)}")
            try:
                if full:
                    feats = np.array([float(row[i]) for i in feat_cols])
                    rec = SampleRecord(int(row[0]), feats, int(row[1]), int(row[2]),
                                       bool(int(row[3])), row[4], int(row[5]))
                else:
                    feats = np.array([float(row[i]) for i in feat_cols])
                    label = int(row[label_col])
                    rec = SampleRecord(len(records), feats, label, label)
            except ValueError as exc:
                raise ParseError(f"{path.name} line {lineno}: {exc}") from None
            if rec.noise_kind not in NOISE_KINDS:
                raise ParseError(f"{path.name} line {lineno}: unknown noise kind "
                                 f"{rec.noise_kind!r}")
            if class_count is not None and rec.observed_label >= class_count:
                raise ParseError(f"{path.name} line {lineno}: label "
                                 f"{rec.observed_label} outside the declared "
                                 f"{class_count} classes")
            if rec.observed_label < 0:
                raise ParseError(f"{path.name} line {lineno}: negative label")
            records.append(rec)
    return records
