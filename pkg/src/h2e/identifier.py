"""Environment-invariant noise identifier.

The identifier rescores a frozen classifier's logits with a learnable
per-class prior adjustment: g(x) = f(phi(x)) - w * log(prior). Only w is
trained, by minimizing cross entropy plus an invariance penalty across
several sampling environments. The penalty is the squared derivative of
each environment's risk with respect to a scalar scale on the logits,
evaluated at scale 1: a predictor whose per-environment risks are all
stationary at the shared scale cannot be leaning on environment-specific
signal. Low adjusted confidence on a sample's observed label marks it as
likely annotation noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .envs import Environment, draw_batch
from .nn import DomainError, NumericError, ShapeError
from .synthdata import SampleRecord, features_matrix, ids_array, labels_array


class IdentifierDiverged(ArithmeticError):
    """Identifier training hit a non-finite loss; message carries diagnostics."""


@dataclass
class Identifier:
    """Per-class adjustment strength w over a fixed class prior."""

    w: np.ndarray
    prior: np.ndarray
    scalar: bool = False

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.prior = np.asarray(self.prior, dtype=float)
        if self.w.shape != self.prior.shape or self.w.ndim != 1:
            raise ShapeError("w and prior must be equal-length vectors")
        if np.any(self.prior <= 0):
            raise DomainError("prior must be strictly positive")
        if abs(float(self.prior.sum()) - 1.0) > 1e-9:
            raise DomainError("prior must sum to 1")
        if not np.all(np.isfinite(self.w)):
            raise NumericError("w must be finite")
        if self.scalar and np.ptp(self.w) > 1e-12:
            raise DomainError("scalar mode requires all entries of w equal")


def make_identifier(prior: np.ndarray, w_init: float = 1.0,
                    scalar: bool = False) -> Identifier:
    prior = np.asarray(prior, dtype=float)
    return Identifier(np.full(prior.shape, float(w_init)), prior, scalar)


@dataclass(frozen=True)
class IrmConfig:
    """Settings for identifier training.

    penalty_weight is held at 0 for the first penalty_warm_steps updates,
    then switched to its target value. grad_clip bounds the L2 norm of each
    step's gradient in w: the penalty's slope grows with |w|, so an
    unclipped overshoot feeds on itself; clipping keeps updates bounded
    without changing the objective (0 disables it).
    """

    penalty_weight: float = 10.0
    penalty_warm_steps: int = 100
    epochs: int = 2
    lr: float = 0.5
    batch_size: int = 64
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.penalty_weight < 0:
            raise DomainError("penalty_weight must be nonnegative")
        if self.penalty_warm_steps < 0:
            raise DomainError("penalty_warm_steps must be nonnegative")
        if self.epochs < 0:
            raise DomainError("epochs must be nonnegative")
        if self.lr <= 0:
            raise DomainError("lr must be positive")
        if self.batch_size < 1:
            raise DomainError("batch_size must be positive")
        if self.grad_clip < 0:
            raise DomainError("grad_clip must be nonnegative")


def adjusted_logits(logits: np.ndarray, w: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """logits - w * log(prior), broadcast over rows. w = 0 is the identity."""
    logits = np.asarray(logits, dtype=float)
    w = np.asarray(w, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if logits.ndim != 2 or logits.shape[1] != prior.shape[0] or w.shape != prior.shape:
        raise ShapeError("logits, w, prior disagree on class count")
    if np.any(prior <= 0):
        raise DomainError("prior must be strictly positive")
    return logits - (w * np.log(prior))[None, :]


def irm_penalty(logits: np.ndarray, labels: np.ndarray):
    """Squared risk-derivative penalty and its analytic logit gradient.

    With R(s) the mean cross entropy of s * logits at the given labels,
    the penalty is (dR/ds at s=1)^2. The derivative has the closed form
    mean_b sum_c logits[b,c] * (softmax(logits)[b,c] - onehot[b,c]).
    Returns (penalty, dpenalty_dlogits).
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("logits must be (B, C) with one label per row")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise DomainError("label outside [0, class_count)")
    b = logits.shape[0]
    p = nn.softmax(logits)
    rows = np.arange(b)
    # dR/ds at s=1, one scalar for the whole batch
    diff = (logits * p).sum(axis=1) - logits[rows, labels]
    deriv = float(diff.mean())
    penalty = deriv * deriv

    # d(deriv)/dlogits: p * (1 + z - sum_c z_c p_c) - onehot, all over B
    weighted = (logits * p).sum(axis=1, keepdims=True)
    ddiff = p * (1.0 + logits - weighted)
    ddiff[rows, labels] -= 1.0
    grad = (2.0 * deriv / b) * ddiff
    return penalty, grad


def train_identifier(envs: Sequence[Environment], net: nn.Network,
                     identifier: Identifier, cfg: IrmConfig,
                     rng: np.random.Generator) -> Identifier:
    """Fit w by descending summed per-environment loss plus the penalty.

    Each step draws one batch from every environment (each environment gets
    its own child generator, so adding or removing environments does not
    disturb the others' draws). The classifier net is frozen throughout;
    only w moves. Raises IdentifierDiverged on a non-finite loss.
    """
    if len(envs) < 2:
        raise DomainError("invariance training needs at least two environments")
    w = identifier.w.copy()
    prior = identifier.prior
    log_prior = np.log(prior)
    env_rngs = rng.spawn(len(envs))

    n_total = envs[0].labels.size
    steps_per_epoch = max(1, n_total // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    velocity = np.zeros_like(w)

    for step in range(total_steps):
        lam = cfg.penalty_weight if step >= cfg.penalty_warm_steps else 0.0
        grad_w = np.zeros_like(w)
        for e, env in enumerate(envs):
            batch = draw_batch(env, cfg.batch_size, env_rngs[e])
            logits = nn.logits_of(net, batch.features)
            adj = adjusted_logits(logits, w, prior)
            try:
                ce, dadj = nn.cross_entropy(adj, batch.labels)
                pen, dpen = irm_penalty(adj, batch.labels)
            except NumericError as err:
                raise IdentifierDiverged(
                    f"identifier overflow at step {step}, environment {e}: "
                    f"{err}; lower lr or penalty_weight") from err
            loss = ce + lam * pen
            if not math.isfinite(loss):
                raise IdentifierDiverged(
                    f"non-finite identifier loss at step {step}, environment {e} "
                    f"(penalty weight {lam}); lower lr or penalty_weight")
            dadj_total = dadj + lam * dpen
            # d(adjusted)/dw_c = -log prior_c, shared by every row
            grad_w += dadj_total.sum(axis=0) * (-log_prior)
        if identifier.scalar:
            grad_w = np.full_like(grad_w, grad_w.sum())
        grad_w += cfg.weight_decay * w
        if cfg.grad_clip > 0:
            norm = float(np.linalg.norm(grad_w))
            if norm > cfg.grad_clip:
                grad_w *= cfg.grad_clip / norm
        velocity = cfg.momentum * velocity + grad_w
        w = w - cfg.lr * velocity

    identifier.w = w
    return identifier


@dataclass
class ConfidenceTable:
    """Per-sample confidence that the observed label is genuine."""

    sample_ids: np.ndarray
    confidences: np.ndarray
    flagged: np.ndarray

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=int)
        self.confidences = np.asarray(self.confidences, dtype=float)
        self.flagged = np.asarray(self.flagged, dtype=bool)
        if not (self.sample_ids.shape == self.confidences.shape == self.flagged.shape):
            raise ShapeError("table columns must be equal length")
        if len(np.unique(self.sample_ids)) != self.sample_ids.size:
            raise DomainError("sample ids must be unique")
        if np.any(self.confidences <= 0) or np.any(self.confidences >= 1):
            raise DomainError("confidences must lie strictly inside (0, 1)")

    def confidence_for(self, ids: np.ndarray) -> np.ndarray:
        """Confidences for the given sample ids, in their order."""
        order = np.argsort(self.sample_ids)
        pos = np.searchsorted(self.sample_ids[order], ids)
        if np.any(pos >= self.sample_ids.size) or \
                np.any(self.sample_ids[order][pos] != ids):
            raise DomainError("unknown sample id in lookup")
        return self.confidences[order[pos]]

    def flagged_ids(self) -> np.ndarray:
        return self.sample_ids[self.flagged]


def score_confidences(identifier: Identifier, net: nn.Network,
                      records: Sequence[SampleRecord]) -> ConfidenceTable:
    """Adjusted softmax probability of each record's observed label."""
    if not records:
        raise DomainError("cannot score an empty record list")
    feats = features_matrix(records)
    labels = labels_array(records)
    logits = nn.logits_of(net, feats)
    adj = adjusted_logits(logits, identifier.w, identifier.prior)
    probs = nn.softmax(adj)
    conf = probs[np.arange(len(records)), labels]
    # softmax of finite logits is strictly inside (0, 1); clip guards the
    # table invariant against denormal underflow on extreme inputs
    conf = np.clip(conf, 1e-300, 1.0 - 1e-16)
    return ConfidenceTable(ids_array(records), conf, np.zeros(len(records), bool))


def rank_noise(table: ConfidenceTable, budget: int) -> ConfidenceTable:
    """Flag the `budget` lowest-confidence samples; ties break on lower id."""
    if budget < 0:
        raise DomainError("budget must be nonnegative")
    budget = min(budget, table.sample_ids.size)
    order = np.lexsort((table.sample_ids, table.confidences))
    flagged = np.zeros(table.sample_ids.size, dtype=bool)
    flagged[order[:budget]] = True
    return ConfidenceTable(table.sample_ids.copy(), table.confidences.copy(), flagged)


def flag_below(table: ConfidenceTable, threshold: float) -> ConfidenceTable:
    """Alternative flagging rule: mark every confidence below a threshold."""
    if not 0.0 < threshold < 1.0:
        raise DomainError("threshold must lie in (0, 1)")
    return ConfidenceTable(table.sample_ids.copy(), table.confidences.copy(),
                           table.confidences < threshold)


def write_confidences(table: ConfidenceTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "confidence", "flagged"])
        for sid, conf, flag in zip(table.sample_ids, table.confidences, table.flagged):
            writer.writerow([int(sid), "%.17g" % conf, int(flag)])


def save_identifier(identifier: Identifier, path) -> None:
    lines = ["identifier v1",
             "w " + " ".join("%.17g" % v for v in identifier.w),
             "prior " + " ".join("%.17g" % v for v in identifier.prior),
             f"scalar {int(identifier.scalar)}"]
    Path(path).write_text("\n".join(lines) + "\n")


def load_identifier(path) -> Identifier:
    raw = Path(path).read_text().splitlines()
    if not raw or raw[0] != "identifier v1":
        raise ValueError("not an identifier file")
    w = np.array([float(v) for v in raw[1].split()[1:]])
    prior = np.array([float(v) for v in raw[2].split()[1:]])
    scalar = bool(int(raw[3].split()[1]))
    return Identifier(w, prior, scalar)
