"""Warm-up stage: short plain training plus density-based initial weights.

A few epochs of ordinary cross entropy give the backbone a rough embedding.
Halfway through, every training sample is scored by how central it sits in
its observed class: the mean cosine similarity between its embedding and
its classmates'. Samples far from their class mass (low density) are early
noise suspects, so the remaining warm-up epochs downweight them via a
per-class min-max map onto [weight_floor, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .nn import DomainError
from .synthdata import (ConfigError, DatasetBundle, features_matrix,
                        labels_array)
from .training import OptimSettings, run_ce_epochs


def class_density(features: np.ndarray):
    """Pairwise cosine similarity matrix and per-row mean density.

    Zero-norm rows have similarity 0 against everything and 1 with
    themselves. Returns (matrix, density).
    """
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise DomainError("class_density expects a nonempty (n, d) matrix")
    norms = np.linalg.norm(feats, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = feats / safe[:, None]
    m = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(m, 1.0)
    return m, m.mean(axis=1)


def initial_weights(density: np.ndarray, weight_floor: float) -> np.ndarray:
    """Min-max normalize densities to [0, 1], then map onto [weight_floor, 1].

    A constant density vector maps to all-ones: with nothing to tell the
    samples apart, nobody gets downweighted.
    """
    if not 0.0 < weight_floor <= 1.0:
        raise DomainError("weight_floor must lie in (0, 1]")
    d = np.asarray(density, dtype=float)
    spread = float(d.max() - d.min())
    if spread < 1e-12:
        return np.ones_like(d)
    t = (d - d.min()) / spread
    return weight_floor + (1.0 - weight_floor) * t


@dataclass
class DensityReport:
    """Density diagnostics for one observed class."""

    class_id: int
    row_indices: np.ndarray   # positions into the train record list
    density: np.ndarray
    weights: np.ndarray


def compute_initial_weights(net: nn.Network, bundle: DatasetBundle,
                            weight_floor: float = 0.2):
    """Per-sample warm-up weights from backbone embedding density.

    Density is computed within each observed class. Returns (weights
    aligned with bundle.train, list of per-class DensityReport).
    """
    feats = features_matrix(bundle.train)
    labels = labels_array(bundle.train)
    emb = nn.features_of(net, feats)
    weights = np.ones(labels.size)
    reports = []
    for c in range(bundle.class_count):
        rows = np.flatnonzero(labels == c)
        if rows.size == 0:
            continue
        _, density = class_density(emb[rows])
        w = initial_weights(density, weight_floor)
        weights[rows] = w
        reports.append(DensityReport(c, rows, density, w))
    return weights, reports


def write_density_csv(bundle: DatasetBundle, reports: Sequence[DensityReport],
                      path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "observed_label", "density", "weight"])
        for rep in reports:
            for row, dens, w in zip(rep.row_indices, rep.density, rep.weights):
                writer.writerow([bundle.train[row].sample_id, rep.class_id,
                                 "%.17g" % dens, "%.17g" % w])


def warmup_train(bundle: DatasetBundle, epochs: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (64,), opt: OptimSettings | None = None,
                 weight_floor: float = 0.2, density_weighting: bool = True,
                 log: Callable[[str], None] | None = None):
    """Stage-0 training run; returns (net, per-sample weights, reports).

    Trains ceil(epochs/2) plain epochs, computes density weights on the
    half-trained backbone, then finishes the remaining epochs with those
    weights (when density_weighting is on and epochs remain).
    """
    if epochs < 1:
        raise ConfigError("warm-up needs at least one epoch")
    if not bundle.train:
        raise ConfigError("cannot warm up on an empty training set")
    opt = opt or OptimSettings()
    feats = features_matrix(bundle.train)
    labels = labels_array(bundle.train)
    net = nn.make_network(bundle.feature_dim, hidden, bundle.class_count, rng)
    state = nn.make_sgd_state(net)

    first = (epochs + 1) // 2
    rest = epochs - first
    run_ce_epochs(net, feats, labels, None, first, opt, rng, state,
                  log=log, stage="warmup", total_epochs=epochs)
    weights = np.ones(labels.size)
    reports = []
    if density_weighting and rest > 0:
        weights, reports = compute_initial_weights(net, bundle, weight_floor)
    if rest > 0:
        run_ce_epochs(net, feats, labels,
                      weights if density_weighting else None,
                      rest, opt, rng, state, log=log, stage="warmup",
                      epoch_offset=first, total_epochs=epochs)
    return net, weights, reports
