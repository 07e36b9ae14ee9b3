"""Staged training pipeline: warm-up, iterative identify-and-soften, rebalance.

Stage 0 warms a network up with density-weighted cross entropy. Each
stage-1 iteration then (a) trains the noise identifier across sampling
environments, (b) scores every training sample's label confidence, and
(c) fine-tunes the whole network with confidence-weighted pair mixing, so
samples the identifier distrusts contribute mostly their partner's label.
Stage 2 finally retrains the classifier head alone with prior-compensated
(balanced-softmax) cross entropy, reweighted by how confidently the
identifier endorses each sample. The epoch budget is split evenly across
iterations, so total gradient-update epochs do not depend on the iteration
count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .envs import build_environments
from .evaluation import (MetricsReport, evaluate_method, noise_detection_pr,
                         true_noise_budget)
from .identifier import (ConfidenceTable, Identifier, IrmConfig,
                         make_identifier, rank_noise, score_confidences,
                         train_identifier, write_confidences, save_identifier)
from .nn import DomainError, ShapeError
from .streams import named_rng
from .synthdata import (ConfigError, DatasetBundle, features_matrix,
                        ids_array, labels_array)
from .training import OptimSettings, TrainingDiverged
from .warmup import warmup_train

CONFIDENCE_FLOOR = 1e-6


@dataclass(frozen=True)
class H2EConfig:
    """Hyperparameters for one full pipeline run."""

    iterations: int = 1
    warmup_epochs: int = 4
    identifier_epochs: int = 2     # total across iterations
    mixup_epochs: int = 8          # total across iterations
    stage2_epochs: int = 4
    irm: IrmConfig = field(default_factory=IrmConfig)
    optim: OptimSettings = field(default_factory=OptimSettings)
    hidden: tuple[int, ...] = (64,)
    theta_floor: float = 0.1
    weight_floor: float = 0.2
    w_init: float = 1.0
    scalar_w: bool = False
    density_weighting: bool = True
    drop_flagged: bool = False
    env_count: int = 3
    env_jitter_overrides: tuple[float | None, ...] | None = None
    env_dropout: float = 0.2
    env_scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.warmup_epochs < 1:
            raise ConfigError("warmup_epochs must be >= 1")
        if min(self.identifier_epochs, self.mixup_epochs, self.stage2_epochs) < 0:
            raise ConfigError("epoch budgets must be nonnegative")
        if not 0.0 <= self.theta_floor <= 1.0:
            raise ConfigError("theta_floor must lie in [0, 1]")

    @property
    def total_epochs(self) -> int:
        return (self.warmup_epochs + self.identifier_epochs
                + self.mixup_epochs + self.stage2_epochs)


def split_budget(total: int, parts: int) -> list[int]:
    """Split an epoch budget into near-equal integer shares, earliest first."""
    if parts < 1:
        raise DomainError("parts must be >= 1")
    if total < 0:
        raise DomainError("total must be nonnegative")
    base, rem = divmod(total, parts)
    return [base + 1 if i < rem else base for i in range(parts)]


@dataclass(frozen=True)
class MixPair:
    """One mixing pair: sample i leads with weight delta, j fills the rest."""

    i: int
    j: int
    delta: float
    features: np.ndarray
    soft_label: np.ndarray


def mix_delta(conf_i: float, conf_j: float) -> float:
    """Lead weight for a pair: its share of the two confidences.

    Confidences are floored at a small positive value so a pair of two
    near-zero confidences still mixes 50/50 instead of dividing by zero.
    """
    ci = max(float(conf_i), CONFIDENCE_FLOOR)
    cj = max(float(conf_j), CONFIDENCE_FLOOR)
    return ci / (ci + cj)


def commensurate_pairs(batch: nn.Batch, table: ConfidenceTable,
                       class_count: int,
                       rng: np.random.Generator) -> list[MixPair]:
    """Pair each batch row with a shuffled partner and mix by confidence.

    Partners come from a random fixed-point-free matching (rows pair up
    mutually); with an odd batch one leftover row pairs with itself. The
    mixed feature is delta * x_i + (1 - delta) * x_j and the soft label
    mixes the one-hot labels with the same weights, delta being sample i's
    confidence share.
    """
    if batch.ids is None:
        raise ShapeError("commensurate_pairs needs batch sample ids")
    b = batch.size
    perm = rng.permutation(b)
    partner = np.arange(b)
    for t in range(b // 2):
        a, c = perm[2 * t], perm[2 * t + 1]
        partner[a], partner[c] = c, a

    conf = table.confidence_for(batch.ids)
    pairs = []
    for i in range(b):
        j = int(partner[i])
        delta = mix_delta(conf[i], conf[j])
        feats = delta * batch.features[i] + (1.0 - delta) * batch.features[j]
        soft = np.zeros(class_count)
        soft[batch.labels[i]] += delta
        soft[batch.labels[j]] += 1.0 - delta
        pairs.append(MixPair(int(batch.ids[i]), int(batch.ids[j]), delta,
                             feats, soft))
    return pairs


def mixup_finetune(net: nn.Network, bundle: DatasetBundle,
                   table: ConfidenceTable, epochs: int, opt: OptimSettings,
                   rng: np.random.Generator,
                   log: Callable[[str], None] | None = None,
                   stage: str = "mixup", epoch_offset: int = 0,
                   total_epochs: int | None = None) -> nn.Network:
    """Fine-tune the whole network on confidence-mixed batches.

    Zero epochs leave the network untouched. Non-finite losses abort.
    """
    if epochs == 0:
        return net
    feats = features_matrix(bundle.train)
    labels = labels_array(bundle.train)
    ids = ids_array(bundle.train)
    n = labels.size
    C = bundle.class_count
    state = nn.make_sgd_state(net)
    if total_epochs is None:
        total_epochs = epoch_offset + epochs
    for epoch in range(epochs):
        lr = opt.lr_at(epoch_offset + epoch, total_epochs)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, opt.batch_size):
            idx = order[start:start + opt.batch_size]
            batch = nn.Batch(feats[idx], labels[idx], ids=ids[idx])
            pairs = commensurate_pairs(batch, table, C, rng)
            mixed = nn.Batch(np.stack([p.features for p in pairs]),
                             batch.labels, ids=batch.ids)
            soft = np.stack([p.soft_label for p in pairs])
            logits = nn.forward(net, mixed)
            loss, dlogits = nn.soft_cross_entropy(logits, soft)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"{stage}: non-finite loss at epoch {epoch_offset + epoch}; "
                    "reduce lr")
            grads = nn.backward(net, mixed, dlogits)
            nn.sgd_step(net, grads, lr, opt.momentum, opt.weight_decay, state)
            losses.append(loss)
        if log is not None:
            log(f"stage={stage} epoch={epoch_offset + epoch} "
                f"loss={np.mean(losses):.6f}")
    return net


def stage1_iteration(net: nn.Network, identifier: Identifier,
                     bundle: DatasetBundle, cfg: H2EConfig, seed: int,
                     iteration: int, identifier_epochs: int, mixup_epochs: int,
                     include: np.ndarray | None = None,
                     log: Callable[[str], None] | None = None,
                     mixup_offset: int = 0, mixup_total: int | None = None):
    """One identify-then-soften pass. Returns (net, identifier, table)."""
    envs = build_environments(bundle, count=cfg.env_count,
                              jitter_overrides=cfg.env_jitter_overrides,
                              dropout_prob=cfg.env_dropout,
                              scale_range=cfg.env_scale_range,
                              include=include)
    irm_cfg = replace(cfg.irm, epochs=identifier_epochs)
    identifier = train_identifier(envs, net, identifier, irm_cfg,
                                  named_rng(seed, f"identifier/t{iteration}"))
    if log is not None:
        wmin, wmax = float(identifier.w.min()), float(identifier.w.max())
        log(f"stage=identifier iteration={iteration} "
            f"w_min={wmin:.4f} w_max={wmax:.4f}")
    table = score_confidences(identifier, net, bundle.train)
    net = mixup_finetune(net, bundle, table, mixup_epochs, cfg.optim,
                         named_rng(seed, f"mixup/t{iteration}"), log=log,
                         epoch_offset=mixup_offset, total_epochs=mixup_total)
    return net, identifier, table


def compute_theta(net: nn.Network, identifier: Identifier,
                  features: np.ndarray, labels: np.ndarray,
                  theta_floor: float) -> np.ndarray:
    """Per-sample stage-2 weights from the identifier's adjusted posterior.

    A sample whose observed label tops the adjusted posterior gets that
    posterior probability as its weight; everything else sinks to the
    floor value.
    """
    from .identifier import adjusted_logits
    logits = nn.logits_of(net, features)
    probs = nn.softmax(adjusted_logits(logits, identifier.w, identifier.prior))
    rows = np.arange(labels.size)
    top = probs.argmax(axis=1)
    theta = np.where(top == labels, probs[rows, labels], theta_floor)
    return theta


def stage2_train(net: nn.Network, identifier: Identifier,
                 bundle: DatasetBundle, cfg: H2EConfig,
                 rng: np.random.Generator,
                 log: Callable[[str], None] | None = None) -> nn.Network:
    """Retrain the classifier head with reweighted balanced softmax.

    The backbone is frozen: only the final layer receives updates, and its
    weights are the only ones weight decay touches. Sample weights are
    recomputed from the identifier at the start of every epoch.
    """
    feats = features_matrix(bundle.train)
    labels = labels_array(bundle.train)
    n = labels.size
    state = nn.make_sgd_state(net)
    mask = [False] * len(net.layers)
    mask[-1] = True
    for epoch in range(cfg.stage2_epochs):
        lr = cfg.optim.lr_at(epoch, cfg.stage2_epochs)
        theta = compute_theta(net, identifier, feats, labels, cfg.theta_floor)
        losses = []
        for start_idx in _epoch_batches(n, cfg.optim.batch_size, rng):
            batch = nn.Batch(feats[start_idx], labels[start_idx],
                             weights=theta[start_idx])
            logits = nn.forward(net, batch)
            loss, dlogits = nn.balanced_softmax_loss(logits, batch.labels,
                                                     bundle.prior, batch.weights)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"stage2: non-finite loss at epoch {epoch}")
            grads = nn.backward(net, batch, dlogits)
            nn.sgd_step(net, grads, lr, cfg.optim.momentum,
                        cfg.optim.weight_decay, state, layer_mask=mask)
            losses.append(loss)
        if log is not None:
            log(f"stage=stage2 epoch={epoch} loss={np.mean(losses):.6f}")
    return net


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@dataclass
class RunResult:
    net: nn.Network
    identifier: Identifier
    table: ConfidenceTable
    flags: ConfidenceTable
    report: MetricsReport
    iteration_tables: list[ConfidenceTable]


def run_h2e(bundle: DatasetBundle, cfg: H2EConfig, seed: int,
            out_dir: Path | str | None = None,
            budget: int | None = None,
            log: Callable[[str], None] | None = None) -> RunResult:
    """Full pipeline run; optionally writes checkpoints and tables under out_dir.

    budget is the flag count used for reported noise metrics; it defaults
    to the bundle's true noise count. The final flag set comes from the
    last iteration's confidence table.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "confidences").mkdir(parents=True, exist_ok=True)
    if budget is None:
        budget = true_noise_budget(bundle)

    net, _, _ = warmup_train(bundle, cfg.warmup_epochs, named_rng(seed, "warmup"),
                             hidden=cfg.hidden, opt=cfg.optim,
                             weight_floor=cfg.weight_floor,
                             density_weighting=cfg.density_weighting, log=log)
    if out is not None:
        nn.save_network(net, out / "checkpoints" / "stage0.txt")

    identifier = make_identifier(bundle.prior, cfg.w_init, cfg.scalar_w)
    id_shares = split_budget(cfg.identifier_epochs, cfg.iterations)
    mix_shares = split_budget(cfg.mixup_epochs, cfg.iterations)

    table = None
    include = None
    history = []
    tables = []
    prev_flag_ids: set[int] = set()
    mix_done = 0
    for t in range(1, cfg.iterations + 1):
        if cfg.drop_flagged and table is not None:
            ids = ids_array(bundle.train)
            flagged_prev = np.isin(ids, list(prev_flag_ids))
            include = ~flagged_prev
        net, identifier, table = stage1_iteration(
            net, identifier, bundle, cfg, seed, t,
            id_shares[t - 1], mix_shares[t - 1], include=include, log=log,
            mixup_offset=mix_done, mixup_total=cfg.mixup_epochs)
        mix_done += mix_shares[t - 1]
        flags_t = rank_noise(table, budget)
        flag_ids = set(int(i) for i in flags_t.flagged_ids())
        p, r = noise_detection_pr(flag_ids, bundle.train)
        history.append({"iteration": t,
                        "identifier_epochs": id_shares[t - 1],
                        "mixup_epochs": mix_shares[t - 1],
                        "flagged": len(flag_ids),
                        "newly_flagged": len(flag_ids - prev_flag_ids),
                        "precision": p, "recall": r})
        prev_flag_ids = flag_ids
        tables.append(flags_t)
        if out is not None:
            nn.save_network(net, out / "checkpoints" / f"stage1_{t}.txt")
            write_confidences(flags_t, out / "confidences" / f"iter_{t}.csv")

    net = stage2_train(net, identifier, bundle, cfg, named_rng(seed, "stage2"),
                       log=log)
    if out is not None:
        nn.save_network(net, out / "checkpoints" / "stage2.txt")
        save_identifier(identifier, out / "checkpoints" / "identifier.txt")

    flags = tables[-1]
    report = evaluate_method("h2e", net, bundle,
                             flagged_ids=flags.flagged_ids(), budget=budget,
                             seed=seed)
    report.history = history
    report.epochs = {"warmup": cfg.warmup_epochs,
                     "identifier": cfg.identifier_epochs,
                     "mixup": cfg.mixup_epochs,
                     "stage2": cfg.stage2_epochs,
                     "total": cfg.total_epochs}
    return RunResult(net, identifier, table, flags, report, tables)
