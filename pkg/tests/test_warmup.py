"""Warm-up tests: density oracle, weight mapping, early-epoch behavior."""

import math

import numpy as np
import pytest

from h2e import nn
from h2e import synthdata as sd
from h2e import warmup as wu
from h2e.nn import DomainError
from h2e.training import OptimSettings, TrainingDiverged, run_ce_epochs, \
    shuffled_batches

RNG = np.random.default_rng


# --------------------------------------------------------------- density

def test_class_density_frozen_three_vector_example():
    r = 1.0 / math.sqrt(2.0)
    feats = np.array([[1.0, 0.0], [r, r], [0.0, 1.0]])
    m, density = wu.class_density(feats)
    assert m[0, 1] == pytest.approx(r, abs=1e-15)
    assert m[1, 2] == pytest.approx(r, abs=1e-15)
    assert m[0, 2] == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(np.diag(m), 1.0)
    assert density[0] == pytest.approx((1.0 + r) / 3.0, abs=1e-15)
    assert density[1] == pytest.approx((1.0 + 2.0 * r) / 3.0, abs=1e-15)
    # the middle vector is closest to the class mass
    assert density[1] > density[0] == density[2]


def test_class_density_matches_brute_force():
    rng = RNG(2)
    for _ in range(10):
        n, d = int(rng.integers(2, 25)), int(rng.integers(1, 8))
        feats = rng.standard_normal((n, d)) * rng.uniform(0.1, 5.0)
        m, density = wu.class_density(feats)
        for i in range(n):
            for j in range(n):
                if i == j:
                    expect = 1.0
                else:
                    ni, nj = np.linalg.norm(feats[i]), np.linalg.norm(feats[j])
                    expect = float(feats[i] @ feats[j] / (ni * nj))
                    expect = min(1.0, max(-1.0, expect))
                assert abs(m[i, j] - expect) <= 1e-12
        assert np.max(np.abs(density - m.mean(axis=1))) <= 1e-15


def test_class_density_zero_norm_rows():
    feats = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]])
    m, density = wu.class_density(feats)
    assert m[0, 1] == 0.0 and m[0, 2] == 0.0
    assert m[0, 0] == 1.0
    assert density[0] == pytest.approx(1.0 / 3.0, abs=1e-15)
    with pytest.raises(DomainError):
        wu.class_density(np.zeros((0, 3)))


# --------------------------------------------------------------- weights

def test_initial_weights_frozen_mapping():
    w = wu.initial_weights(np.array([1.0, 0.5, 0.0]), 0.2)
    assert np.allclose(w, [1.0, 0.6, 0.2], atol=1e-15)


def test_initial_weights_constant_density_gives_ones():
    assert np.array_equal(wu.initial_weights(np.full(4, 0.37), 0.2), np.ones(4))


def test_initial_weights_monotone_and_bounded():
    rng = RNG(3)
    for _ in range(10):
        density = rng.uniform(-1, 1, size=int(rng.integers(2, 40)))
        floor = float(rng.uniform(0.05, 0.95))
        w = wu.initial_weights(density, floor)
        order = np.argsort(density)
        assert np.all(np.diff(w[order]) >= -1e-15)
        if density.max() - density.min() >= 1e-12:
            assert w.min() == pytest.approx(floor, abs=1e-12)
            assert w.max() == pytest.approx(1.0, abs=1e-12)


def test_initial_weights_floor_validation():
    with pytest.raises(DomainError):
        wu.initial_weights(np.array([0.1, 0.2]), 0.0)
    with pytest.raises(DomainError):
        wu.initial_weights(np.array([0.1, 0.2]), 1.2)
    assert np.array_equal(wu.initial_weights(np.array([0.1, 0.9]), 1.0),
                          np.ones(2))


# ---------------------------------------------------------- training loop

def test_shuffled_batches_cover_every_index_once():
    batches = list(shuffled_batches(10, 4, RNG(5)))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_lr_schedule_endpoints():
    const = OptimSettings(lr=0.2)
    assert const.lr_at(0, 10) == 0.2 and const.lr_at(9, 10) == 0.2
    cos = OptimSettings(lr=0.2, lr_schedule="cosine")
    assert cos.lr_at(0, 10) == pytest.approx(0.2)
    assert cos.lr_at(10, 10) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DomainError):
        OptimSettings(lr_schedule="triangle")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_ce_epochs_is_deterministic_and_diverges_loudly():
    rng = RNG(6)
    feats = rng.standard_normal((40, 5))
    labels = rng.integers(0, 3, size=40)
    opt = OptimSettings(lr=0.1, batch_size=16)

    def train(seed, lr_scale=1.0):
        net = nn.make_network(5, (8,), 3, RNG(seed))
        o = OptimSettings(lr=opt.lr * lr_scale, batch_size=16)
        run_ce_epochs(net, feats, labels, None, 3, o, RNG(seed + 1))
        return net

    a, b = train(9), train(9)
    for la, lb in zip(a.layers, b.layers):
        assert la.weight.tobytes() == lb.weight.tobytes()
        assert la.bias.tobytes() == lb.bias.tobytes()
    with pytest.raises(TrainingDiverged):
        train(9, lr_scale=1e180)


# ---------------------------------------------------------------- warm-up

def noisy_bundle(seed=0, noise_rate=0.3):
    spec = sd.make_generative_spec(4, 2, 12, RNG(seed), noise_scale=0.25)
    return sd.build_bundle(spec, 60, 4.0, noise_rate, 1.0, 5, RNG(seed + 1),
                           config={"noise_scale": 0.25})


def test_warmup_returns_trained_net_and_aligned_weights():
    bundle = noisy_bundle()
    net, weights, reports = wu.warmup_train(bundle, 4, RNG(10))
    assert net.feature_dim == 12 and net.class_count == 4
    assert weights.shape == (len(bundle.train),)
    assert np.all((weights >= 0.2 - 1e-12) & (weights <= 1.0 + 1e-12))
    covered = np.concatenate([r.row_indices for r in reports])
    assert sorted(covered.tolist()) == list(range(len(bundle.train)))


def test_warmup_is_reproducible():
    bundle = noisy_bundle(seed=2)
    net_a, w_a, _ = wu.warmup_train(bundle, 4, RNG(11))
    net_b, w_b, _ = wu.warmup_train(bundle, 4, RNG(11))
    assert w_a.tobytes() == w_b.tobytes()
    for la, lb in zip(net_a.layers, net_b.layers):
        assert la.weight.tobytes() == lb.weight.tobytes()


def test_warmup_single_epoch_skips_density_weighting():
    bundle = noisy_bundle(seed=3)
    _, weights, reports = wu.warmup_train(bundle, 1, RNG(12))
    assert np.array_equal(weights, np.ones(len(bundle.train)))
    assert reports == []
    with pytest.raises(sd.ConfigError):
        wu.warmup_train(bundle, 0, RNG(12))


def test_warmup_density_weighting_off_means_plain_training():
    bundle = noisy_bundle(seed=4)
    _, weights, reports = wu.warmup_train(bundle, 4, RNG(13),
                                          density_weighting=False)
    assert np.array_equal(weights, np.ones(len(bundle.train)))
    assert reports == []


def test_clean_samples_fit_before_flipped_ones():
    # early in training the model tracks the majority (clean) signal, so
    # accuracy on flipped observed labels lags accuracy on clean ones
    bundle = noisy_bundle(seed=5)
    net, _, _ = wu.warmup_train(bundle, 4, RNG(14))
    feats = sd.features_matrix(bundle.train)
    labels = sd.labels_array(bundle.train)
    pred = np.argmax(nn.logits_of(net, feats), axis=1)
    noisy = np.array([r.is_noise for r in bundle.train])
    clean_acc = float((pred[~noisy] == labels[~noisy]).mean())
    noisy_acc = float((pred[noisy] == labels[noisy]).mean())
    assert clean_acc > noisy_acc + 0.1


def test_flipped_samples_sit_in_low_density_regions():
    bundle = noisy_bundle(seed=6)
    net, weights, _ = wu.warmup_train(bundle, 4, RNG(15))
    noisy = np.array([r.is_noise for r in bundle.train])
    assert weights[~noisy].mean() > weights[noisy].mean() + 0.05


def test_density_csv_layout(tmp_path):
    bundle = noisy_bundle(seed=7)
    net, weights, reports = wu.warmup_train(bundle, 4, RNG(16))
    path = tmp_path / "density.csv"
    wu.write_density_csv(bundle, reports, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "sample_id,observed_label,density,weight"
    assert len(lines) == 1 + len(bundle.train)
    sid, label, dens, w = lines[1].split(",")
    assert int(label) == 0
    assert 0.0 < float(w) <= 1.0
