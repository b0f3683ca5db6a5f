import numpy as np
import pytest

from bnlab.config import ARCH_CNN, ARCH_LINEAR
from bnlab.exceptions import ConfigError, StructuralError
from bnlab.models.tensors import TensorDict
from bnlab.services import bn_stats, nn_core, oracles
from bnlab.services.nn_core import BN_EVAL, BN_INJECTED, BN_TRAIN


def straight_line_mlp(params, x, eps):
    def bn(y, name):
        mean = y.mean(axis=0)
        var = ((y - mean) ** 2).mean(axis=0)
        return params[f"{name}.alpha"] * (y - mean) / np.sqrt(var + eps) + params[f"{name}.beta"]

    h = x @ params["fc1.weight"].T + params["fc1.bias"]
    h = np.maximum(bn(h, "bn1"), 0.0)
    h = h @ params["fc2.weight"].T + params["fc2.bias"]
    h = np.maximum(bn(h, "bn2"), 0.0)
    return h @ params["fc3.weight"].T + params["fc3.bias"]


def test_mlp_counts(mlp_model):
    arch, params, running = mlp_model
    assert arch.weight_count == 103
    assert params.size == 103
    assert arch.stats_count == 20
    assert running.size == 20
    assert arch.depth == 3
    assert arch.bn_param_keys() == ["bn1.alpha", "bn1.beta", "bn2.alpha", "bn2.beta"]


def test_train_forward_matches_straight_line_evaluation(mlp_model, rng):
    arch, params, _ = mlp_model
    params = params.replace({"bn1.alpha": rng.random(5) + 0.5, "bn2.beta": rng.standard_normal(5)})
    x = rng.standard_normal((4, 6))
    logits, _, used = nn_core.forward(arch, params, x, BN_TRAIN)
    expected = straight_line_mlp(params, x, 1e-5)
    assert np.allclose(logits, expected, rtol=1e-12, atol=1e-14)
    assert used.keys() == ["bn1.mean", "bn1.var", "bn2.mean", "bn2.var"]


def test_eval_forward_returns_no_statistics(mlp_model, rng):
    arch, params, running = mlp_model
    x = rng.standard_normal((3, 6))
    logits_eval, _, used = nn_core.forward(arch, params, x, BN_EVAL, running)
    logits_injected, _, injected = nn_core.forward(arch, params, x, BN_INJECTED, running)
    assert len(used) == 0
    assert injected.equals(running)
    assert np.array_equal(logits_eval, logits_injected)


def test_eval_needs_statistics(mlp_model, rng):
    arch, params, running = mlp_model
    with pytest.raises(StructuralError):
        nn_core.forward(arch, params, rng.standard_normal((3, 6)), BN_EVAL)
    with pytest.raises(StructuralError):
        nn_core.forward(arch, params, rng.standard_normal((3, 6)), BN_TRAIN, running)


def test_batch_shape_is_checked(mlp_model, rng):
    arch, params, _ = mlp_model
    with pytest.raises(StructuralError):
        nn_core.forward(arch, params, rng.standard_normal((3, 5)), BN_TRAIN)


def test_zero_logits_bias_gradient(mlp_model, rng):
    arch, params, _ = mlp_model
    params = params.replace({"fc3.weight": np.zeros((3, 5)), "fc3.bias": np.zeros(3)})
    x = rng.standard_normal((4, 6))
    targets = np.array([0, 1, 2, 2])
    _, cache, _ = nn_core.forward(arch, params, x, BN_TRAIN)
    grad, loss = nn_core.backward(arch, params, cache, targets)
    onehot = np.eye(3)[targets]
    assert np.allclose(grad["fc3.bias"], (np.full((4, 3), 1 / 3) - onehot).mean(axis=0))
    assert loss == pytest.approx(np.log(3.0))


def test_cross_entropy_gradient_rows_sum_to_zero(rng):
    logits = rng.standard_normal((5, 4))
    _, grad = nn_core.cross_entropy(logits, rng.integers(0, 4, 5))
    assert np.allclose(grad.sum(axis=1), 0.0)


def test_backward_rejects_foreign_cache(mlp_model, rng):
    arch, params, _ = mlp_model
    other = nn_core.mlp((6,), 3, hidden=4)
    _, cache, _ = nn_core.forward(other, nn_core.init_params(other, 0), rng.standard_normal((4, 6)), BN_TRAIN)
    with pytest.raises(StructuralError):
        nn_core.backward(arch, params, cache, np.zeros(4, dtype=int))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mlp_gradients_match_finite_differences(mlp_model, seed):
    arch, params, _ = mlp_model
    rng = np.random.default_rng(seed)
    report = oracles.check_gradients(arch, params, rng.standard_normal((8, 6)), rng.integers(0, 3, 8), seed=seed)
    assert report.passed, report.witness


def test_injected_mode_gradients_match_finite_differences(mlp_model, rng):
    arch, params, running = mlp_model
    stats = running.replace({"bn1.mean": rng.standard_normal(5), "bn2.var": rng.random(5) + 0.5})
    report = oracles.check_gradients(arch, params, rng.standard_normal((6, 6)), rng.integers(0, 3, 6),
                                     bn_mode=BN_INJECTED, injected_stats=stats)
    assert report.passed, report.witness


def test_cnn_gradients_match_finite_differences(rng):
    arch = nn_core.build_architecture(ARCH_CNN, (1, 8, 8), 3)
    params = nn_core.init_params(arch, 3)
    report = oracles.check_gradients(arch, params, rng.standard_normal((4, 1, 8, 8)), rng.integers(0, 3, 4),
                                     max_coords=150)
    assert report.passed, report.witness


def test_linear_model_gradients_are_near_exact(rng):
    arch = nn_core.build_architecture(ARCH_LINEAR, (5,), 3)
    params = nn_core.init_params(arch, 0)
    report = oracles.check_gradients(arch, params, rng.standard_normal((6, 5)), rng.integers(0, 3, 6),
                                     tolerance=1e-8)
    assert report.passed, report.witness
    assert report.witness["skipped"] == 0


def test_train_and_frozen_modes_differ(mlp_model, rng):
    arch, params, running = mlp_model
    x, targets = rng.standard_normal((8, 6)), rng.integers(0, 3, 8)
    _, train_cache, used = nn_core.forward(arch, params, x, BN_TRAIN)
    _, frozen_cache, _ = nn_core.forward(arch, params, x, BN_INJECTED, used)
    train_grad, train_loss = nn_core.backward(arch, params, train_cache, targets)
    frozen_grad, frozen_loss = nn_core.backward(arch, params, frozen_cache, targets)
    assert train_loss == pytest.approx(frozen_loss)
    assert train_grad.max_abs_diff(frozen_grad) > 1e-6


def test_train_forward_applies_corrected_statistics(mlp_model, rng):
    arch, params, running = mlp_model
    x = rng.standard_normal((8, 6))
    k_local = running.map(lambda v: rng.standard_normal(v.shape))
    # a large variance pull makes some channels hit the floor
    k_global = k_local.replace({"bn1.var": k_local["bn1.var"] - 5.0})
    _, cache, used = nn_core.forward(arch, params, x, BN_TRAIN, stats_shift=k_global - k_local,
                                     var_threshold=0.01)
    expected = bn_stats.correct_stats(cache.raw_stats, k_local, k_global, 0.01)
    assert used.equals(expected)
    assert np.any(used["bn1.var"] == 0.01)


def test_train_forward_routes_correction_through_bn_stats(mlp_model, rng, monkeypatch):
    arch, params, running = mlp_model
    calls = []
    original = bn_stats.shift_stats

    def recording(batch, shift, var_threshold=None):
        calls.append(sorted(batch.keys()))
        return original(batch, shift, var_threshold)

    monkeypatch.setattr(bn_stats, "shift_stats", recording)
    shift = running.map(lambda v: np.full(v.shape, 0.25))
    nn_core.forward(arch, params, rng.standard_normal((4, 6)), BN_TRAIN, stats_shift=shift)
    assert calls == [["bn1.mean", "bn1.var"], ["bn2.mean", "bn2.var"]]


def test_sgd_step_hand_value():
    w = TensorDict([("w", np.array([1.0]))])
    out = nn_core.sgd_step(w, TensorDict([("w", np.array([0.5]))]), TensorDict([("w", np.array([0.1]))]), 0.2)
    assert out["w"][0] == pytest.approx(0.88)


def test_sgd_step_cancellation_and_plain_step():
    w = TensorDict([("w", np.array([1.0, -2.0]))])
    g = TensorDict([("w", np.array([0.3, 0.7]))])
    assert nn_core.sgd_step(w, g, -g, 0.5).equals(w)
    assert np.allclose(nn_core.sgd_step(w, g, g.zeros_like(), 0.5)["w"], [0.85, -2.35])
    with pytest.raises(ConfigError):
        nn_core.sgd_step(w, g, g, 0.0)


def test_architecture_errors():
    with pytest.raises(ConfigError):
        nn_core.build_architecture("resnet", (6,), 3)
    with pytest.raises(ConfigError):
        nn_core.small_cnn((64,), 3)
    with pytest.raises(StructuralError):
        nn_core.small_cnn((1, 6, 6), 3)


def test_init_is_seeded(mlp_model):
    arch, params, _ = mlp_model
    assert nn_core.init_params(arch, 1).equals(params)
    assert not nn_core.init_params(arch, 2).equals(params)
