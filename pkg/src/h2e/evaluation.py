"""Metrics and reference baselines.

Classes are bucketed by training frequency into many / medium / few shot
groups, and every metric is reported overall plus per group. Noise
detection is scored as precision and recall of a flag set against ground
truth. Metrics with an empty denominator are reported as an explicit
undefined sentinel (None), never as 0.

Baselines:
* ce: plain instance-balanced training.
* la: same training, but inference subtracts log prior from the logits to
  counteract head-class bias.
* smallloss: short warm-up, drop the highest-loss fraction globally, keep
  training on the remainder (loss-based noise filtering).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn
from .nn import DomainError
from .synthdata import (ConfigError, DatasetBundle, SampleRecord,
                        features_matrix, ids_array, labels_array)
from .training import OptimSettings, per_sample_losses, run_ce_epochs

SPLITS = ("overall", "many", "medium", "few")


class UndefinedMetric(ValueError):
    """The metric has no value on the given (empty) sample set."""


@dataclass(frozen=True)
class ShotSplit:
    many: tuple[int, ...]
    medium: tuple[int, ...]
    few: tuple[int, ...]

    def classes_of(self, split: str) -> tuple[int, ...]:
        if split == "overall":
            return self.many + self.medium + self.few
        return getattr(self, split)


def shot_split(class_counts: Sequence[int]) -> ShotSplit:
    """Bucket classes by training count: top ceil(C/4) many, bottom
    floor(C/4) few, the middle half medium. Ties order by class id."""
    counts = np.asarray(class_counts, dtype=int)
    C = counts.size
    if C < 1:
        raise DomainError("need at least one class")
    if C < 4:
        warnings.warn(f"only {C} classes: all assigned to the many-shot group")
        return ShotSplit(tuple(range(C)), (), ())
    # sort by count descending, class id ascending on ties
    order = np.lexsort((np.arange(C), -counts))
    n_many = math.ceil(C / 4)
    n_few = C // 4
    return ShotSplit(tuple(int(c) for c in order[:n_many]),
                     tuple(int(c) for c in order[n_many:C - n_few]),
                     tuple(int(c) for c in order[C - n_few:]))


def accuracy(net: nn.Network, records: Sequence[SampleRecord],
             classes: Iterable[int] | None = None,
             logit_offset: np.ndarray | None = None) -> float:
    """Fraction of records whose argmax prediction matches the label.

    classes restricts to records labeled within the given set. An empty
    evaluation set has no accuracy and raises UndefinedMetric.
    logit_offset, when given, is added to every logit row before argmax
    (post-hoc adjustment hook).
    """
    recs = list(records)
    if classes is not None:
        allowed = set(classes)
        recs = [r for r in recs if r.observed_label in allowed]
    if not recs:
        raise UndefinedMetric("accuracy over an empty record set")
    logits = nn.logits_of(net, features_matrix(recs))
    if logit_offset is not None:
        logits = logits + np.asarray(logit_offset, dtype=float)[None, :]
    pred = logits.argmax(axis=1)
    truth = labels_array(recs)
    return float(np.mean(pred == truth))


def noise_detection_pr(flagged_ids: Iterable[int],
                       records: Sequence[SampleRecord],
                       classes: Iterable[int] | None = None):
    """Precision and recall of a flag set against is_noise ground truth.

    Restriction by class uses the observed label (the class under which the
    sample sits in the training set). Either value is None when its
    denominator is empty. Returns (precision, recall).
    """
    flagged = set(int(i) for i in flagged_ids)
    recs = list(records)
    if classes is not None:
        allowed = set(classes)
        recs = [r for r in recs if r.observed_label in allowed]
    n_flagged = sum(1 for r in recs if r.sample_id in flagged)
    n_noise = sum(1 for r in recs if r.is_noise)
    n_hit = sum(1 for r in recs if r.is_noise and r.sample_id in flagged)
    precision = n_hit / n_flagged if n_flagged else None
    recall = n_hit / n_noise if n_noise else None
    return precision, recall


@dataclass
class MetricsReport:
    """All metrics for one method on one bundle, JSON-serializable."""

    method: str
    top1: dict
    noise_precision: dict
    noise_recall: dict
    budget: int | None = None
    seed: int | None = None
    history: list = field(default_factory=list)
    epochs: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"method": self.method, "seed": self.seed, "budget": self.budget,
                "top1": self.top1, "noise_precision": self.noise_precision,
                "noise_recall": self.noise_recall, "history": self.history,
                "epochs": self.epochs, "extras": self.extras}

    def to_text(self) -> str:
        """One line per (metric, split), stable order, for terminal display."""
        lines = []
        for metric, table in (("top1", self.top1),
                              ("noise_precision", self.noise_precision),
                              ("noise_recall", self.noise_recall)):
            for split in SPLITS:
                value = table.get(split)
                shown = "undefined" if value is None else f"{value:.4f}"
                lines.append(f"{self.method}.{metric}.{split} = {shown}")
        return "\n".join(lines)


def split_table(fn: Callable[[Iterable[int] | None], float | None],
                split: ShotSplit) -> dict:
    """Evaluate fn overall and per shot group; empty groups map to None."""
    table = {}
    for name in SPLITS:
        classes = None if name == "overall" else split.classes_of(name)
        if classes is not None and not classes:
            table[name] = None
            continue
        table[name] = fn(classes)
    return table


def evaluate_method(method: str, net: nn.Network, bundle: DatasetBundle,
                    flagged_ids: Iterable[int] | None = None,
                    budget: int | None = None,
                    logit_offset: np.ndarray | None = None,
                    seed: int | None = None) -> MetricsReport:
    """Standard report: test accuracy and train-noise detection per split."""
    split = shot_split(bundle.class_counts)
    if not bundle.test:
        raise ConfigError("bundle has no test records to evaluate")

    def acc(classes):
        try:
            return accuracy(net, bundle.test, classes, logit_offset)
        except UndefinedMetric:
            return None

    flags = list(flagged_ids) if flagged_ids is not None else []
    def prec(classes):
        return noise_detection_pr(flags, bundle.train, classes)[0]
    def rec(classes):
        return noise_detection_pr(flags, bundle.train, classes)[1]

    return MetricsReport(method=method, seed=seed, budget=budget,
                         top1=split_table(acc, split),
                         noise_precision=split_table(prec, split),
                         noise_recall=split_table(rec, split))


def true_noise_budget(bundle: DatasetBundle) -> int:
    """Flagging budget equal to the number of genuinely noisy train records."""
    return sum(1 for r in bundle.train if r.is_noise)


def baseline_ce(bundle: DatasetBundle, epochs: int, rng: np.random.Generator,
                hidden: Sequence[int] = (64,), opt: OptimSettings | None = None,
                log: Callable[[str], None] | None = None, seed: int | None = None):
    """Plain cross-entropy training; returns (net, MetricsReport)."""
    opt = opt or OptimSettings()
    feats = features_matrix(bundle.train)
    labels = labels_array(bundle.train)
    net = nn.make_network(bundle.feature_dim, hidden, bundle.class_count, rng)
    run_ce_epochs(net, feats, labels, None, epochs, opt, rng,
                  log=log, stage="ce", total_epochs=epochs)
    report = evaluate_method("ce", net, bundle, seed=seed)
    report.epochs = {"total": epochs}
    return net, report


def baseline_la(bundle: DatasetBundle, epochs: int, rng: np.random.Generator,
                hidden: Sequence[int] = (64,), opt: OptimSettings | None = None,
                log: Callable[[str], None] | None = None, seed: int | None = None):
    """CE training with post-hoc prior correction at inference.

    Predictions come from logits - log(prior), which strips the head-class
    advantage a frequency-biased trainer bakes in. On a balanced bundle the
    offset is constant and predictions match plain CE exactly.
    """
    opt = opt or OptimSettings()
    feats = features_matrix(bundle.train)
    labels = labels_array(bundle.train)
    net = nn.make_network(bundle.feature_dim, hidden, bundle.class_count, rng)
    run_ce_epochs(net, feats, labels, None, epochs, opt, rng,
                  log=log, stage="la", total_epochs=epochs)
    offset = -np.log(bundle.prior)
    report = evaluate_method("la", net, bundle, logit_offset=offset, seed=seed)
    report.epochs = {"total": epochs}
    return net, report


def baseline_smallloss(bundle: DatasetBundle, epochs: int, drop_rate: float,
                       rng: np.random.Generator, hidden: Sequence[int] = (64,),
                       opt: OptimSettings | None = None,
                       warm_epochs: int | None = None,
                       budget: int | None = None,
                       log: Callable[[str], None] | None = None,
                       seed: int | None = None):
    """Loss-based filtering: warm up, drop the top drop_rate losses, go on.

    Dropping is global (not per class), which is the method's known blind
    spot on long tails: rare-class cleans carry large losses too. The flag
    set reported for precision/recall is the `budget` highest-loss samples
    at the filtering point (budget defaults to the true noise count).
    drop_rate 0 keeps every sample, making the run identical to baseline_ce
    under the same generator.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise DomainError("drop_rate must lie in [0, 1)")
    opt = opt or OptimSettings()
    if warm_epochs is None:
        warm_epochs = max(1, epochs // 4)
    if warm_epochs > epochs:
        raise ConfigError("warm_epochs cannot exceed the total epoch budget")
    feats = features_matrix(bundle.train)
    labels = labels_array(bundle.train)
    ids = ids_array(bundle.train)
    net = nn.make_network(bundle.feature_dim, hidden, bundle.class_count, rng)
    state = nn.make_sgd_state(net)
    run_ce_epochs(net, feats, labels, None, warm_epochs, opt, rng, state,
                  log=log, stage="smallloss-warm", total_epochs=epochs)

    losses = per_sample_losses(net, feats, labels)
    # highest loss first; ties break on lower sample id
    order = np.lexsort((ids, -losses))
    if budget is None:
        budget = true_noise_budget(bundle)
    flags = ids[order[:budget]]
    n_drop = int(math.floor(drop_rate * labels.size))
    keep = np.ones(labels.size, dtype=bool)
    keep[order[:n_drop]] = False

    run_ce_epochs(net, feats[keep], labels[keep], None, epochs - warm_epochs,
                  opt, rng, state, log=log, stage="smallloss",
                  epoch_offset=warm_epochs, total_epochs=epochs)
    report = evaluate_method("smallloss", net, bundle, flagged_ids=flags,
                             budget=budget, seed=seed)
    report.epochs = {"warm": warm_epochs, "filtered": epochs - warm_epochs,
                     "total": epochs}
    report.extras["dropped"] = n_drop
    return net, report


def reports_to_json(reports: Sequence[MetricsReport], bundle_info: dict,
                    config_echo: dict | None = None) -> str:
    """Deterministic JSON text for a run's full report."""
    payload = {
        "bundle": bundle_info,
        "config": config_echo or {},
        "methods": {r.method: r.to_dict() for r in reports},
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
