import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pathtracer import numerics as nx
from pathtracer.model import ModelConfig
from pathtracer.numerics import Tensor
from pathtracer.samples import Timeline, build_samples
from pathtracer.synth import SynthConfig, generate
from pathtracer.training import (
    Adam,
    TrainConfig,
    consistency_indicators,
    consistency_loss,
    oversample,
    prediction_loss,
    stratified_split,
    total_loss,
    train,
    write_history,
)

CLOSE = 1e-9


def one_step(total):
    """A single-step rate history whose five rates sum to ``total``."""
    return np.full((1, 5), total / 5)


# --------------------------------------------------------------- closed forms


def test_prediction_loss_closed_forms():
    assert prediction_loss(one_step(1.0), 1, 1).item() == pytest.approx(1.0, abs=CLOSE)
    assert prediction_loss(one_step(1.0), 0, 1).item() == pytest.approx(-math.log(1 - math.exp(-1)), abs=CLOSE)
    assert prediction_loss(one_step(1.0), 0, 1).item() == pytest.approx(0.4587, abs=1e-4)
    assert prediction_loss(one_step(0.0), 1, 1).item() == pytest.approx(0.0, abs=CLOSE)


def test_prediction_loss_uses_history_up_to_t_m():
    rates = np.vstack([one_step(0.4), one_step(0.6), one_step(5.0)])
    assert prediction_loss(rates, 1, 2).item() == pytest.approx(1.0, abs=CLOSE)
    with pytest.raises(ValueError):
        prediction_loss(rates, 1, 4)


def test_negative_label_loss_is_clamped_at_zero_total():
    assert prediction_loss(one_step(0.0), 0, 1).item() == pytest.approx(-math.log(1e-12), abs=1e-6)
    assert prediction_loss(one_step(-2.0), 0, 1).item() == pytest.approx(-math.log(1e-12), abs=1e-6)


@given(st.floats(-5, 5), st.sampled_from([0, 1]))
def test_prediction_loss_is_non_negative(total, label):
    assert prediction_loss(one_step(total), label, 1).item() >= 0.0


@given(st.floats(1e-3, 5), st.floats(1e-3, 1))
def test_positive_label_loss_increases_with_cumulative_rate(total, step):
    low = prediction_loss(one_step(total), 1, 1).item()
    high = prediction_loss(one_step(total + step), 1, 1).item()
    assert high > low


@given(st.floats(-5, 5), st.floats(0, 1))
def test_positive_label_loss_never_decreases(total, step):
    assert prediction_loss(one_step(total + step), 1, 1).item() >= prediction_loss(one_step(total), 1, 1).item()


def test_consistency_cases():
    assert consistency_loss(np.array([one_step(0.5)[0], one_step(0.3)[0]]), 2) == 0.0
    assert consistency_loss(np.array([one_step(0.5)[0], one_step(-0.3)[0]]), 2) == 1.0
    for total in (-1.0, 0.0, 1.0):
        assert consistency_loss(one_step(total), 1) == 0.0
    np.testing.assert_array_equal(consistency_indicators([0.5, -0.1, 0.0, 0.2, -0.2]), [0, 1, 0, 0, 1])


def test_total_loss_single_sample_single_step():
    rates = Tensor(one_step(1.0)[None])
    expected = -math.log(1 - math.exp(-1))
    assert total_loss(rates, [0], gamma=2.0).item() == pytest.approx(expected, abs=CLOSE)


def test_total_loss_hand_computed_two_samples():
    # sample 0: totals [0.5, -0.2], label 1; sample 1: totals [0.3, 0.4], label 0
    rates = Tensor(np.stack([np.vstack([one_step(0.5), one_step(-0.2)]), np.vstack([one_step(0.3), one_step(0.4)])]))
    gamma = 0.5
    pos = 0.5 + math.sqrt(2) * (0.3 + gamma * 1.0)
    neg = -math.log(1 - math.exp(-0.3)) + math.sqrt(2) * -math.log(1 - math.exp(-0.7))
    assert total_loss(rates, [1, 0], gamma).item() == pytest.approx(pos + neg, abs=CLOSE)


def test_gamma_zero_is_pure_prediction_loss():
    rates = Tensor(np.stack([np.vstack([one_step(0.5), one_step(-0.9)])]))
    expected = 0.5 + math.sqrt(2) * 0.0
    assert total_loss(rates, [1], 0.0).item() == pytest.approx(expected, abs=CLOSE)


def test_sqrt_t_weighting_ratio():
    # zero rates after the first step keep the per-step loss equal at every t
    rates = np.zeros((1, 4, 5))
    rates[0, 0] = 0.2
    per_step = 1.0
    full = total_loss(Tensor(rates), [1], 0.0).item()
    assert full == pytest.approx(per_step * sum(math.sqrt(t) for t in range(1, 5)), abs=CLOSE)
    first = total_loss(Tensor(rates[:, :1]), [1], 0.0).item()
    three = total_loss(Tensor(rates[:, :3]), [1], 0.0).item()
    assert (full - three) / first == pytest.approx(2.0, abs=CLOSE)


def test_total_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    rates = Tensor(rng.uniform(0.05, 0.3, size=(3, 4, 5)), requires_grad=True)
    err = nx.grad_check(lambda: total_loss(rates, [1, 0, 1], 1.0), [rates], eps=1e-6, rtol=1e-6)
    assert err <= 1e-6


# ---------------------------------------------------------------- optimizer


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam(lr=0.1)
    for _ in range(500):
        with nx.Tape() as tape:
            loss = nx.sum_(x * x)
        tape.backward(loss)
        opt.step({"x": x})
    assert np.all(np.abs(x.value) < 1e-2)


def test_adam_clips_global_gradient_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    a.grad, b.grad = np.array([300.0, 0.0]), np.array([0.0, 400.0])
    clipped = Adam(lr=0.1, max_grad_norm=5.0)
    clipped.step({"a": a, "b": b})
    m_a, v_a = clipped.moments["a"]
    np.testing.assert_allclose(m_a, [0.1 * 3.0, 0.0])
    np.testing.assert_allclose(v_a, [0.001 * 9.0, 0.0])


# ------------------------------------------------------------- splits/batches


@given(st.integers(0, 1000), st.integers(5, 60), st.integers(20, 200))
def test_stratified_split_partitions_and_keeps_shares(seed, n_pos, n_neg):
    labels = [1] * n_pos + [0] * n_neg
    tr, va, te = stratified_split(labels, (0.7, 0.15, 0.15), seed)
    assert sorted(tr + va + te) == list(range(len(labels)))
    for part, share in ((tr, 0.7), (va, 0.15)):
        assert abs(sum(labels[i] for i in part) - share * n_pos) <= 1


def test_oversample_reaches_positive_share():
    labels = [1] * 5 + [0] * 95
    out = oversample(list(range(100)), labels, 0.2, np.random.default_rng(0))
    share = sum(labels[i] for i in out) / len(out)
    assert share == pytest.approx(0.2, abs=0.01)
    assert set(range(100)) <= set(out)


@pytest.mark.parametrize("kwargs", [{"lr": 0}, {"gamma": -1}, {"split": (0.5, 0.5, 0.5)}, {"max_grad_norm": 0}])
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# ------------------------------------------------------------------ training

FIXTURE_CFG = ModelConfig(d=8, heads=2, horizon=4, path_cap=16)


@pytest.fixture(scope="module")
def small_samples():
    synth = generate(SynthConfig(addresses=40, malicious_fraction=0.25, horizon_hours=4, seed=3))
    return build_samples(synth.ledger, synth.labels, FIXTURE_CFG, timeline=Timeline(horizon=4))


def _fresh(samples):
    for s in samples:
        s.scaled = {}
    return samples


def test_loss_decreases_over_first_epochs(small_samples):
    result = train(_fresh(small_samples), FIXTURE_CFG, TrainConfig(epochs=3, patience=3, batch_size=8, lr=3e-3))
    losses = [r.train_loss for r in result.history]
    assert losses[2] < losses[0]


def test_same_seed_gives_identical_history(small_samples, tmp_path):
    tcfg = TrainConfig(epochs=2, patience=2, batch_size=8, seed=5)
    a = train(_fresh(small_samples), FIXTURE_CFG, tcfg)
    b = train(_fresh(small_samples), FIXTURE_CFG, tcfg)
    write_history(a.history, tmp_path / "a.csv")
    write_history(b.history, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,train_loss,val_F1E,val_F1C"
    assert all(np.array_equal(a.params[k].value, b.params[k].value) for k in a.params)


def test_single_class_dataset_is_rejected(small_samples):
    negatives = [s for s in small_samples if s.label == 0]
    with pytest.raises(ValueError, match="both classes"):
        train(_fresh(negatives), FIXTURE_CFG, TrainConfig(epochs=1))
