"""Training environments: class-biased samplers paired with augmentation tiers.

An environment is a with-replacement sampling distribution over the training
set (class first, then uniform within the class) plus a feature augmentation
applied to every drawn row. Distinct environments expose the model to
different class marginals and perturbation strengths, which is what lets an
invariance penalty separate stable class signal from environment-bound
context.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Batch, DomainError, ShapeError
from .synthdata import (ConfigError, DatasetBundle, features_matrix,
                        ids_array, labels_array)

SAMPLERS = ("instance", "balanced", "reversed")
TIER_KINDS = ("off", "simple", "strong")

# the canonical sampler/tier pairings for 2, 3, or 4 environments
DEFAULT_LAYOUTS = {
    2: (("instance", "off"), ("reversed", "strong")),
    3: (("instance", "off"), ("balanced", "simple"), ("reversed", "strong")),
    4: (("instance", "off"), ("balanced", "simple"), ("reversed", "strong"),
        ("balanced", "strong")),
}


@dataclass(frozen=True)
class AugmentTier:
    """A feature perturbation of fixed strength.

    kind 'off' is the identity; 'simple' adds isotropic jitter; 'strong'
    zeroes coordinates with probability dropout_prob, rescales the row by a
    uniform draw from scale_range, then adds jitter. Draw order is fixed:
    dropout mask, scale, jitter.
    """

    kind: str
    jitter_sigma: float = 0.0
    dropout_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in TIER_KINDS:
            raise DomainError(f"unknown tier kind {self.kind!r}")
        if self.jitter_sigma < 0:
            raise DomainError("jitter_sigma must be nonnegative")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise DomainError("dropout_prob must lie in [0, 1)")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise DomainError("scale_range must satisfy 0 < lo <= hi")
        if self.kind == "off" and (self.jitter_sigma != 0.0 or self.dropout_prob != 0.0
                                   or self.scale_range != (1.0, 1.0)):
            raise DomainError("'off' tier must carry neutral parameters")


def off_tier() -> AugmentTier:
    return AugmentTier("off")


def simple_tier(jitter_sigma: float) -> AugmentTier:
    return AugmentTier("simple", jitter_sigma=jitter_sigma)


def strong_tier(jitter_sigma: float, dropout_prob: float = 0.2,
                scale_range: tuple[float, float] = (0.8, 1.2)) -> AugmentTier:
    return AugmentTier("strong", jitter_sigma, dropout_prob, scale_range)


def default_tier(kind: str, noise_scale: float,
                 jitter_override: float | None = None,
                 dropout_prob: float = 0.2,
                 scale_range: tuple[float, float] = (0.8, 1.2)) -> AugmentTier:
    """Tier with jitter tied to the data's own noise scale unless overridden.

    Defaults: simple jitter = 0.5 * noise_scale, strong jitter = noise_scale.
    """
    if kind == "off":
        return off_tier()
    if kind == "simple":
        sigma = 0.5 * noise_scale if jitter_override is None else jitter_override
        return simple_tier(sigma)
    if kind == "strong":
        sigma = noise_scale if jitter_override is None else jitter_override
        return strong_tier(sigma, dropout_prob, scale_range)
    raise DomainError(f"unknown tier kind {kind!r}")


def augment_batch(x: np.ndarray, tier: AugmentTier, rng: np.random.Generator) -> np.ndarray:
    """Apply a tier to each row of x. 'off' returns the values unchanged."""
    x = np.asarray(x, dtype=float)
    if tier.kind == "off":
        return x.copy()
    if tier.kind == "simple":
        return x + tier.jitter_sigma * rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= tier.dropout_prob
    lo, hi = tier.scale_range
    scales = lo + (hi - lo) * rng.random(x.shape[0])
    out = x * keep * scales[:, None]
    return out + tier.jitter_sigma * rng.standard_normal(x.shape)


def augment(x: np.ndarray, tier: AugmentTier, rng: np.random.Generator) -> np.ndarray:
    """Single-row convenience wrapper around augment_batch."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError("augment expects a single feature vector")
    return augment_batch(x[None, :], tier, rng)[0]


@dataclass
class Environment:
    """A sampling distribution over one training set plus an augmentation."""

    sampler: str
    tier: AugmentTier
    class_weights: np.ndarray       # (C,) sums to 1; empty classes weigh 0
    features: np.ndarray            # (n, d)
    labels: np.ndarray              # (n,)
    ids: np.ndarray                 # (n,)
    pools: list[np.ndarray]         # per-class row indices into features

    @property
    def class_count(self) -> int:
        return len(self.pools)


def sampler_weights(counts: np.ndarray, sampler: str) -> np.ndarray:
    """Class-pick probabilities for a sampler over observed class counts.

    instance: proportional to counts; balanced: uniform over nonempty
    classes; reversed: proportional to 1/count. Empty classes get weight 0.
    """
    counts = np.asarray(counts, dtype=float)
    if sampler not in SAMPLERS:
        raise DomainError(f"unknown sampler {sampler!r}")
    nonempty = counts > 0
    if not np.any(nonempty):
        raise ConfigError("cannot build sampler weights: every class is empty")
    w = np.zeros_like(counts)
    if sampler == "instance":
        w[nonempty] = counts[nonempty]
    elif sampler == "balanced":
        w[nonempty] = 1.0
    else:
        w[nonempty] = 1.0 / counts[nonempty]
    return w / w.sum()


def build_environments(bundle: DatasetBundle,
                       layout: Sequence[tuple[str, str]] | None = None,
                       tiers: Sequence[AugmentTier] | None = None,
                       count: int = 3,
                       jitter_overrides: Sequence[float | None] | None = None,
                       dropout_prob: float = 0.2,
                       scale_range: tuple[float, float] = (0.8, 1.2),
                       include: np.ndarray | None = None) -> list[Environment]:
    """Build the environment set over a bundle's training records.

    layout is a list of (sampler, tier kind) pairs; None picks the default
    layout for `count` (2 to 4 environments). Explicit AugmentTier objects
    in `tiers` override tier construction entirely. `include` is an optional
    boolean mask over train records restricting every pool (used to drop
    flagged samples between iterations). Empty classes are dropped from all
    pools with a warning.
    """
    if layout is None:
        if count not in DEFAULT_LAYOUTS:
            raise ConfigError(f"environment count must be one of "
                              f"{sorted(DEFAULT_LAYOUTS)}, got {count}")
        layout = DEFAULT_LAYOUTS[count]
    if not 2 <= len(layout) <= 4:
        raise ConfigError("need between 2 and 4 environments")

    feats = features_matrix(bundle.train)
    labels = labels_array(bundle.train)
    ids = ids_array(bundle.train)
    if include is not None:
        include = np.asarray(include, dtype=bool)
        if include.shape != labels.shape:
            raise ShapeError("include mask must align with train records")
        feats, labels, ids = feats[include], labels[include], ids[include]
        if labels.size == 0:
            raise ConfigError("include mask removed every training record")

    C = bundle.class_count
    pools = [np.flatnonzero(labels == c) for c in range(C)]
    counts = np.array([len(p) for p in pools])
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        warnings.warn(f"dropping empty classes from sampling pools: {empty.tolist()}")

    noise_scale = float(bundle.config.get("noise_scale", 1.0) or 1.0)
    envs = []
    for k, (sampler, tier_kind) in enumerate(layout):
        if tiers is not None:
            tier = tiers[k]
        else:
            override = jitter_overrides[k] if jitter_overrides else None
            tier = default_tier(tier_kind, noise_scale, override,
                                dropout_prob, scale_range)
        envs.append(Environment(sampler, tier, sampler_weights(counts, sampler),
                                feats, labels, ids, pools))
    return envs


def draw_batch(env: Environment, batch_size: int, rng: np.random.Generator) -> Batch:
    """Draw batch_size rows with replacement: class by weight, row uniform.

    Rows are augmented by the environment's tier. Sampling is fully
    vectorized; draw order is class picks, in-class positions, then the
    tier's own draws.
    """
    if batch_size < 1:
        raise DomainError("batch_size must be positive")
    classes = rng.choice(env.class_count, size=batch_size, p=env.class_weights)
    pool_sizes = np.array([len(p) for p in env.pools])
    offsets = np.concatenate(([0], np.cumsum(pool_sizes)))
    flat = np.concatenate(env.pools)
    positions = np.floor(rng.random(batch_size) * pool_sizes[classes]).astype(int)
    rows = flat[offsets[classes] + positions]
    feats = augment_batch(env.features[rows], env.tier, rng)
    return Batch(feats, env.labels[rows], ids=env.ids[rows])
