"""Shared minibatch-loop plumbing used by the warm-up, stages, and baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import nn
from .nn import DomainError


class TrainingDiverged(ArithmeticError):
    """A training loss went non-finite. Lower the learning rate."""


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "constant"   # constant | cosine
    batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise DomainError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be nonnegative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise DomainError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1:
            raise DomainError("batch_size must be positive")

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        if self.lr_schedule == "cosine":
            return nn.cosine_lr(self.lr, epoch, max(total_epochs, 1))
        return self.lr


def shuffled_batches(n: int, batch_size: int,
                     rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Yield index arrays covering 0..n-1 once, in shuffled order."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def run_ce_epochs(net: nn.Network, features: np.ndarray, labels: np.ndarray,
                  sample_weights: np.ndarray | None, epochs: int,
                  opt: OptimSettings, rng: np.random.Generator,
                  state: nn.SgdState | None = None,
                  log: Callable[[str], None] | None = None,
                  stage: str = "train", epoch_offset: int = 0,
                  total_epochs: int | None = None) -> nn.Network:
    """Plain cross-entropy epochs over a fixed sample set.

    epoch_offset/total_epochs position this call inside a larger budget so
    a cosine schedule spans the whole run rather than restarting.
    """
    n = labels.size
    if state is None:
        state = nn.make_sgd_state(net)
    if total_epochs is None:
        total_epochs = epoch_offset + epochs
    for epoch in range(epochs):
        lr = opt.lr_at(epoch_offset + epoch, total_epochs)
        losses = []
        for idx in shuffled_batches(n, opt.batch_size, rng):
            w = None if sample_weights is None else sample_weights[idx]
            batch = nn.Batch(features[idx], labels[idx], weights=w)
            try:
                logits = nn.forward(net, batch)
                loss, dlogits = nn.cross_entropy(logits, batch.labels,
                                                 batch.weights)
            except nn.NumericError as err:
                raise TrainingDiverged(
                    f"{stage}: {err} at epoch {epoch_offset + epoch}; "
                    f"reduce lr (currently {lr:g})") from err
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"{stage}: non-finite loss at epoch {epoch_offset + epoch}; "
                    f"reduce lr (currently {lr:g})")
            grads = nn.backward(net, batch, dlogits)
            nn.sgd_step(net, grads, lr, opt.momentum, opt.weight_decay, state)
            losses.append(loss)
        if log is not None:
            log(f"stage={stage} epoch={epoch_offset + epoch} "
                f"loss={np.mean(losses):.6f}")
    return net


def per_sample_losses(net: nn.Network, features: np.ndarray,
                      labels: np.ndarray) -> np.ndarray:
    """Unweighted negative log-likelihood of each sample's observed label."""
    logp = nn.log_softmax(nn.logits_of(net, features))
    return -logp[np.arange(labels.size), labels]
