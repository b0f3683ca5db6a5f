import numpy as np
import pytest

from bnlab.exceptions import ConfigError, DegenerateBatchError, StructuralError
from bnlab.services import bn_stats
from bnlab.services.bn_stats import MODE_BATCH, MODE_FROZEN


def stats(mean, var, layer="bn1"):
    return bn_stats.make_stats([(layer, np.atleast_1d(np.asarray(mean, dtype=np.float64)),
                                 np.atleast_1d(np.asarray(var, dtype=np.float64)))])


def test_batch_stats_duplicated_row():
    x = np.array([1.0, -2.0, 3.0])
    mean, var = bn_stats.batch_stats(np.stack([x, x]))
    assert np.array_equal(mean, x)
    assert np.array_equal(var, np.zeros(3))


def test_batch_stats_symmetric_pair():
    a = np.array([0.5, 2.0])
    mean, var = bn_stats.batch_stats(np.stack([-a, a]))
    assert np.allclose(mean, 0.0)
    assert np.allclose(var, a ** 2)


def test_batch_stats_matches_two_pass(rng):
    y = rng.standard_normal((8, 4))
    mean, var = bn_stats.batch_stats(y)
    expected_mean = np.array([sum(y[i, j] for i in range(8)) / 8 for j in range(4)])
    expected_var = np.array([sum((y[i, j] - expected_mean[j]) ** 2 for i in range(8)) / 8 for j in range(4)])
    assert np.allclose(mean, expected_mean, rtol=0, atol=1e-12)
    assert np.allclose(var, expected_var, rtol=0, atol=1e-12)


def test_batch_stats_images_reduce_over_space(rng):
    y = rng.standard_normal((3, 2, 4, 4))
    mean, var = bn_stats.batch_stats(y)
    assert mean.shape == (2,)
    assert np.allclose(mean, y.transpose(1, 0, 2, 3).reshape(2, -1).mean(axis=1))
    assert np.allclose(var, y.transpose(1, 0, 2, 3).reshape(2, -1).var(axis=1))


def test_single_sample_batch_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        bn_stats.batch_stats(np.ones((1, 3)))


def test_ema_update_hand_value():
    out = bn_stats.ema_update(stats(2.0, 2.0), stats(4.0, 4.0), 0.9)
    assert out["bn1.mean"][0] == pytest.approx(2.2)


def test_ema_update_limits():
    running, incoming = stats(2.0, 1.0), stats(4.0, 3.0)
    assert bn_stats.ema_update(running, incoming, 0.0).equals(incoming)
    assert bn_stats.ema_update(running, incoming, 1.0).equals(running)
    with pytest.raises(ConfigError):
        bn_stats.ema_update(running, incoming, 1.5)


@pytest.mark.parametrize("rho", [0.5, 0.9, 0.99])
def test_ema_unrolls_to_geometric_sum(rng, rho):
    E = 10
    start = stats(rng.standard_normal(3), rng.random(3) + 0.5)
    trace = [stats(rng.standard_normal(3), rng.random(3) + 0.5) for _ in range(E)]
    running = start
    for incoming in trace:
        running = bn_stats.ema_update(running, incoming, rho)
    expected = start * rho ** E
    for t, incoming in enumerate(trace, start=1):
        expected = expected + incoming * ((1.0 - rho) * rho ** (E - t))
    assert running.max_abs_diff(expected) < 1e-12


def test_clip_variance_is_idempotent(rng):
    s = stats(rng.standard_normal(6), rng.standard_normal(6))
    once = bn_stats.clip_variance(s, 0.1)
    assert bn_stats.clip_variance(once, 0.1).equals(once)
    assert np.all(once["bn1.var"] >= 0.1)
    assert np.array_equal(once["bn1.mean"], s["bn1.mean"])


def test_correct_stats_hand_value():
    out = bn_stats.correct_stats(stats(1.0, 1.0), stats(0.3, 0.0), stats(0.1, 0.0), 1e-2)
    assert out["bn1.mean"][0] == pytest.approx(0.8)


def test_correct_stats_clips_variance():
    out = bn_stats.correct_stats(stats(0.0, 0.5), stats(0.0, 1.0), stats(0.0, 0.0), 1e-2)
    assert out["bn1.var"][0] == pytest.approx(1e-2)
    assert out["bn1.mean"][0] == 0.0


def test_equal_control_variates_leave_batch_stats_unchanged(rng):
    batch = stats(rng.standard_normal(4), rng.random(4) + 0.5)
    k = stats(rng.standard_normal(4), rng.standard_normal(4))
    assert bn_stats.correct_stats(batch, k, k, 0.0).equals(batch)


def test_bn_forward_hand_value():
    x, _ = bn_stats.bn_forward(np.array([[3.0]]), np.array([1.0]), np.array([3.0]), np.array([2.0]),
                               np.array([-1.0]), epsilon=1.0)
    assert x[0, 0] == pytest.approx(1.0)


def test_bn_forward_identity_and_constant_input():
    y = np.array([[0.3, -1.2], [2.0, 0.1]])
    eps = 1e-5
    x, _ = bn_stats.bn_forward(y, np.zeros(2), np.full(2, 1.0 - eps), np.ones(2), np.zeros(2), eps)
    assert np.allclose(x, y)
    beta = np.array([0.7, -0.4])
    x, _ = bn_stats.bn_forward(np.tile([1.0, 2.0], (3, 1)), np.array([1.0, 2.0]), np.ones(2), np.ones(2), beta, eps)
    assert np.allclose(x, np.tile(beta, (3, 1)))


def test_bn_forward_standardized_pair():
    y = np.array([[-1.0], [1.0]])
    mean, var = bn_stats.batch_stats(y)
    x, _ = bn_stats.bn_forward(y, mean, var, np.ones(1), np.zeros(1), 1e-12, MODE_BATCH, batch_mean=mean)
    assert np.allclose(x, y)


def test_batch_mode_output_is_standardized(rng):
    y = rng.standard_normal((32, 4)) * np.array([0.5, 2.0, 7.0, 1.0]) + np.array([3.0, -1.0, 0.0, 10.0])
    mean, var = bn_stats.batch_stats(y)
    eps = 1e-5
    x, _ = bn_stats.bn_forward(y, mean, var, np.ones(4), np.zeros(4), eps, MODE_BATCH, batch_mean=mean)
    assert np.allclose(x.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(x.var(axis=0), var / (var + eps), rtol=1e-10)
    assert np.allclose(x.var(axis=0), 1.0, atol=1e-4)


def test_frozen_backward_is_affine_chain_rule(rng):
    y = rng.standard_normal((5, 3))
    var = rng.random(3) + 0.5
    eps = 1e-5
    _, cache = bn_stats.bn_forward(y, rng.standard_normal(3), var, np.ones(3), np.zeros(3), eps, MODE_FROZEN)
    dout = rng.standard_normal((5, 3))
    dy, _, _ = bn_stats.bn_backward(dout, cache, MODE_FROZEN)
    assert np.allclose(dy, dout / np.sqrt(var + eps))


def test_batch_backward_constant_upstream_sums_to_zero(rng):
    y = rng.standard_normal((6, 3))
    mean, var = bn_stats.batch_stats(y)
    _, cache = bn_stats.bn_forward(y, mean, var, rng.random(3) + 0.5, np.zeros(3), 1e-5, MODE_BATCH,
                                   batch_mean=mean)
    dy, _, _ = bn_stats.bn_backward(np.ones((6, 3)), cache, MODE_BATCH)
    assert np.allclose(dy.sum(axis=0), 0.0, atol=1e-12)


def test_backward_mode_mismatch():
    y = np.array([[1.0], [2.0]])
    _, cache = bn_stats.bn_forward(y, np.zeros(1), np.ones(1), np.ones(1), np.zeros(1), 1e-5, MODE_FROZEN)
    with pytest.raises(StructuralError):
        bn_stats.bn_backward(np.ones((2, 1)), cache, MODE_BATCH)


def test_stats_layers_keep_order():
    s = bn_stats.make_stats([("bn2", np.zeros(1), np.ones(1)), ("bn1", np.zeros(1), np.ones(1))])
    assert bn_stats.stats_layers(s) == ["bn2", "bn1"]
