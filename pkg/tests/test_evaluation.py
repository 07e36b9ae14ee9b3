"""Evaluation tests: shot buckets, PR arithmetic, baseline contracts."""

import json
import warnings

import numpy as np
import pytest

from h2e import evaluation as evl
from h2e import nn
from h2e import synthdata as sd
from h2e.training import OptimSettings

RNG = np.random.default_rng


def record(sid, label, noisy=False, feats=None, clean=None):
    f = np.zeros(2) if feats is None else np.asarray(feats, dtype=float)
    c = label if clean is None else clean
    kind = "blue" if noisy else "clean"
    return sd.SampleRecord(sid, f, label, c, noisy, kind, 0)


def identity_net(c):
    return nn.Network([nn.Layer(np.eye(c), np.zeros(c), "linear")])


# ------------------------------------------------------------ shot split

def test_shot_split_frozen_buckets():
    s4 = evl.shot_split([40, 30, 20, 10])
    assert (s4.many, s4.medium, s4.few) == ((0,), (1, 2), (3,))
    s8 = evl.shot_split(list(range(80, 0, -10)))
    assert len(s8.many) == 2 and len(s8.medium) == 4 and len(s8.few) == 2
    s10 = evl.shot_split(list(range(100, 0, -10)))
    assert (len(s10.many), len(s10.medium), len(s10.few)) == (3, 5, 2)
    assert s10.many == (0, 1, 2) and s10.few == (8, 9)


def test_shot_split_ties_resolve_by_class_id():
    s = evl.shot_split([10, 10, 10, 10])
    assert (s.many, s.medium, s.few) == ((0,), (1, 2), (3,))


def test_shot_split_small_class_counts_warn():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        s = evl.shot_split([5, 3, 2])
    assert any("many-shot" in str(w.message) for w in caught)
    assert s.many == (0, 1, 2) and s.medium == () and s.few == ()
    assert s.classes_of("overall") == (0, 1, 2)


# -------------------------------------------------------------- accuracy

def test_accuracy_counts_argmax_matches():
    net = identity_net(2)
    recs = [record(0, 0, feats=[2.0, 0.0]), record(1, 1, feats=[0.0, 3.0]),
            record(2, 0, feats=[0.0, 1.0]), record(3, 1, feats=[5.0, 0.0])]
    assert evl.accuracy(net, recs) == 0.5
    assert evl.accuracy(net, recs, classes=[0]) == 0.5
    assert evl.accuracy(net, recs, classes=[1]) == 0.5
    with pytest.raises(evl.UndefinedMetric):
        evl.accuracy(net, [])
    with pytest.raises(evl.UndefinedMetric):
        evl.accuracy(net, recs, classes=[17])


def test_accuracy_logit_offset_shifts_decisions():
    net = identity_net(2)
    recs = [record(0, 1, feats=[1.0, 0.0])]
    assert evl.accuracy(net, recs) == 0.0
    assert evl.accuracy(net, recs, logit_offset=np.array([0.0, 2.0])) == 1.0


# ------------------------------------------------------- noise detection

def test_noise_pr_frozen_fractions():
    # 20 noisy of 40; 10 flags of which 6 hit -> precision .6, recall .3
    recs = [record(i, 0, noisy=(i < 20)) for i in range(40)]
    flags = list(range(6)) + list(range(30, 34))
    p, r = evl.noise_detection_pr(flags, recs)
    assert p == pytest.approx(0.6, abs=1e-15)
    assert r == pytest.approx(0.3, abs=1e-15)


def test_noise_pr_undefined_sentinels():
    clean = [record(i, 0) for i in range(5)]
    p, r = evl.noise_detection_pr([], clean)
    assert p is None           # nothing flagged
    assert r is None           # nothing noisy
    noisy = [record(i, 0, noisy=True) for i in range(5)]
    p, r = evl.noise_detection_pr([0, 1], noisy)
    assert p == 1.0 and r == pytest.approx(0.4)


def test_noise_pr_class_restriction_uses_observed_label():
    recs = [record(0, 0, noisy=True), record(1, 1, noisy=True),
            record(2, 1, noisy=False)]
    p, r = evl.noise_detection_pr([0, 2], recs, classes=[1])
    assert p == 0.0 and r == 0.0
    p, r = evl.noise_detection_pr([0], recs, classes=[0])
    assert p == 1.0 and r == 1.0


def test_true_noise_budget_counts_ground_truth():
    recs = [record(0, 0, noisy=True), record(1, 0), record(2, 1, noisy=True)]
    bundle = sd.DatasetBundle(recs, [record(9, 0)], np.array([2, 1]),
                              np.array([2 / 3, 1 / 3]), {})
    assert evl.true_noise_budget(bundle) == 2


# --------------------------------------------------------------- reports

def small_bundle(seed=0, imbalance=4.0, noise_rate=0.2, C=4):
    spec = sd.make_generative_spec(C, 2, 12, RNG(seed), noise_scale=0.4)
    return sd.build_bundle(spec, 40, imbalance, noise_rate, 0.5, 8,
                           RNG(seed + 1), config={"noise_scale": 0.4})


def test_evaluate_method_tables_and_text():
    bundle = small_bundle()
    net = nn.make_network(12, (8,), 4, RNG(5))
    report = evl.evaluate_method("demo", net, bundle, flagged_ids=[0, 1],
                                 budget=2, seed=7)
    for table in (report.top1, report.noise_precision, report.noise_recall):
        assert set(table) == set(evl.SPLITS)
    text = report.to_text()
    assert "demo.top1.overall = " in text
    assert len(text.splitlines()) == 12
    assert report.budget == 2 and report.seed == 7


def test_overall_accuracy_is_count_weighted_mean_of_groups():
    bundle = small_bundle(seed=3)
    net, report = evl.baseline_ce(bundle, 3, RNG(6))
    split = evl.shot_split(bundle.class_counts)
    total, weighted = 0, 0.0
    for name in ("many", "medium", "few"):
        classes = set(split.classes_of(name))
        n = sum(1 for r in bundle.test if r.observed_label in classes)
        if report.top1[name] is not None:
            weighted += n * report.top1[name]
            total += n
    assert total == len(bundle.test)
    assert abs(report.top1["overall"] - weighted / total) <= 1e-12


def test_three_class_bundle_reports_undefined_groups():
    bundle = small_bundle(seed=4, C=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        net, report = evl.baseline_ce(bundle, 2, RNG(7))
    assert report.top1["medium"] is None
    assert report.top1["few"] is None
    assert "undefined" in report.to_text()


# -------------------------------------------------------------- baselines

def nets_equal(a, b):
    return all(la.weight.tobytes() == lb.weight.tobytes()
               and la.bias.tobytes() == lb.bias.tobytes()
               for la, lb in zip(a.layers, b.layers))


def test_prior_corrected_inference_matches_ce_on_balanced_data():
    # noise off: label flips would skew the observed counts and the prior
    bundle = small_bundle(seed=8, imbalance=1.0, noise_rate=0.0)
    net_ce, rep_ce = evl.baseline_ce(bundle, 3, RNG(9))
    net_la, rep_la = evl.baseline_la(bundle, 3, RNG(9))
    assert nets_equal(net_ce, net_la)   # identical training stream
    assert rep_la.top1 == rep_ce.top1   # constant offset, same argmax


def test_prior_corrected_inference_diverges_on_skewed_data():
    bundle = small_bundle(seed=10, imbalance=8.0)
    _, rep_ce = evl.baseline_ce(bundle, 3, RNG(11))
    _, rep_la = evl.baseline_la(bundle, 3, RNG(11))
    # same net, different decision rule; reports must disagree somewhere
    assert rep_la.top1 != rep_ce.top1


def test_loss_filter_with_zero_drop_matches_plain_ce():
    bundle = small_bundle(seed=12)
    net_ce, _ = evl.baseline_ce(bundle, 4, RNG(13))
    net_sl, rep = evl.baseline_smallloss(bundle, 4, 0.0, RNG(13))
    assert nets_equal(net_ce, net_sl)
    assert rep.extras["dropped"] == 0
    assert len(list(rep.noise_precision)) == 4
    assert rep.budget == evl.true_noise_budget(bundle)


def test_loss_filter_drops_the_requested_fraction():
    bundle = small_bundle(seed=14)
    n = len(bundle.train)
    _, rep = evl.baseline_smallloss(bundle, 4, 0.25, RNG(15), warm_epochs=2)
    assert rep.extras["dropped"] == int(np.floor(0.25 * n))
    assert rep.epochs == {"warm": 2, "filtered": 2, "total": 4}
    with pytest.raises(nn.DomainError):
        evl.baseline_smallloss(bundle, 4, 1.0, RNG(15))
    with pytest.raises(sd.ConfigError):
        evl.baseline_smallloss(bundle, 2, 0.1, RNG(15), warm_epochs=3)


def test_report_json_is_deterministic_and_sorted():
    bundle = small_bundle(seed=16)
    _, rep = evl.baseline_ce(bundle, 2, RNG(17))
    info = {"train_size": len(bundle.train), "classes": bundle.class_count}
    a = evl.reports_to_json([rep], info, {"seed": "1"})
    b = evl.reports_to_json([rep], info, {"seed": "1"})
    assert a == b
    payload = json.loads(a)
    assert list(payload) == sorted(payload)
    assert payload["methods"]["ce"]["top1"]["overall"] == rep.top1["overall"]
