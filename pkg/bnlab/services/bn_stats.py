"""
Batch-normalization statistics service: empirical batch statistics, EMA running
statistics, the linear statistics correction with variance clipping, and the BN
forward/backward kernels used by the network engine.

Statistics vectors are TensorDicts keyed "<bn layer>.mean" / "<bn layer>.var".
Variances are the biased (1/m) estimator everywhere.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from bnlab.exceptions import ConfigError, DegenerateBatchError, StructuralError
from bnlab.models.tensors import TensorDict

MEAN_SUFFIX = ".mean"
VAR_SUFFIX = ".var"

# True:  s_hat <- rho * s_hat + (1 - rho) * s   (EMA keeps rho of the running value)
# False: s_hat <- (1 - rho) * s_hat + rho * s
EMA_KEEPS_RUNNING = True

MODE_BATCH = "batch"
MODE_FROZEN = "frozen"


def mean_key(layer: str) -> str:
    return layer + MEAN_SUFFIX


def var_key(layer: str) -> str:
    return layer + VAR_SUFFIX


def stats_layers(stats: TensorDict) -> List[str]:
    """BN layer names in architecture order."""
    return [k[: -len(MEAN_SUFFIX)] for k in stats.keys() if k.endswith(MEAN_SUFFIX)]


def make_stats(pairs: Sequence[Tuple[str, np.ndarray, np.ndarray]]) -> TensorDict:
    items = []
    for layer, mean, var in pairs:
        items.append((mean_key(layer), mean))
        items.append((var_key(layer), var))
    return TensorDict(items)


def reduce_axes(ndim: int) -> Tuple[int, ...]:
    """Axes averaged over for a (N, C) or (N, C, H, W) activation."""
    if ndim == 2:
        return (0,)
    if ndim == 4:
        return (0, 2, 3)
    raise StructuralError(f"batch norm expects 2-D or 4-D activations, got {ndim}-D")


def _broadcast(vector: np.ndarray, ndim: int) -> np.ndarray:
    return vector.reshape((1, -1) + (1,) * (ndim - 2))


def batch_stats(y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over the batch (and spatial dims)."""
    if y.shape[0] < 2:
        raise DegenerateBatchError(f"batch statistics need at least 2 samples, got {y.shape[0]}")
    axes = reduce_axes(y.ndim)
    mean = y.mean(axis=axes)
    centered = y - _broadcast(mean, y.ndim)
    var = np.mean(centered * centered, axis=axes)
    return mean, var


def ema_update(running: TensorDict, incoming: TensorDict, rho: float) -> TensorDict:
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1], got {rho}", field="algorithm.rho")
    running.check_congruent(incoming, "running and incoming statistics")
    keep = rho if EMA_KEEPS_RUNNING else 1.0 - rho
    return running * keep + incoming * (1.0 - keep)


def clip_variance(stats: TensorDict, var_threshold: float) -> TensorDict:
    """Raise every variance component to at least var_threshold; means untouched."""
    if var_threshold < 0:
        raise ConfigError(f"variance threshold must be >= 0, got {var_threshold}", field="algorithm.var_threshold")
    return TensorDict(
        (k, np.maximum(v, var_threshold) if k.endswith(VAR_SUFFIX) else v) for k, v in stats.items()
    )


def shift_stats(batch: TensorDict, shift: TensorDict, var_threshold: Optional[float] = None) -> TensorDict:
    """batch + shift, variance clipped when a threshold is given."""
    shifted = batch + shift
    return shifted if var_threshold is None else clip_variance(shifted, var_threshold)


def correct_stats(batch: TensorDict, k_local: TensorDict, k_global: TensorDict,
                  var_threshold: float) -> TensorDict:
    """s_tilde = s - k_i + k, variance clipped at var_threshold.

    The shift is formed first, (k - k_i), so that equal control variates leave
    the batch statistics bit-identical.
    """
    return shift_stats(batch, k_global - k_local, var_threshold)


@dataclass
class BNCache:
    y: np.ndarray
    centered: np.ndarray
    x_hat: np.ndarray
    inv_std: np.ndarray
    alpha: np.ndarray
    mode: str
    batch_mean: Optional[np.ndarray] = None
    clipped: Optional[np.ndarray] = None


def bn_forward(y: np.ndarray, mean: np.ndarray, var: np.ndarray, alpha: np.ndarray,
               beta: np.ndarray, epsilon: float, mode: str = MODE_FROZEN,
               batch_mean: Optional[np.ndarray] = None,
               clipped: Optional[np.ndarray] = None) -> Tuple[np.ndarray, BNCache]:
    """x = alpha * (y - mean) / sqrt(var + epsilon) + beta, per channel.

    In batch mode `batch_mean` is the live batch mean the (possibly shifted)
    `mean` was derived from, and `clipped` flags the channels whose variance was
    raised to the threshold; both are needed to differentiate through the
    statistics.
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}", field="training.epsilon")
    if mode == MODE_BATCH and batch_mean is None:
        raise StructuralError("batch-mode BN forward needs the live batch mean")
    ndim = y.ndim
    inv_std = 1.0 / np.sqrt(var + epsilon)
    centered = y - _broadcast(mean, ndim)
    x_hat = centered * _broadcast(inv_std, ndim)
    x = _broadcast(alpha, ndim) * x_hat + _broadcast(beta, ndim)
    cache = BNCache(y=y, centered=centered, x_hat=x_hat, inv_std=inv_std, alpha=alpha, mode=mode,
                    batch_mean=batch_mean, clipped=clipped)
    return x, cache


def bn_backward(dout: np.ndarray, cache: BNCache, mode: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. the BN input, alpha and beta.

    batch mode: statistics are functions of the batch (full three-term backward);
    any additive shift on them is a constant. frozen mode: statistics are constants.
    """
    if mode != cache.mode:
        raise StructuralError(f"BN backward in '{mode}' mode over a '{cache.mode}' forward cache")
    ndim = dout.ndim
    axes = reduce_axes(ndim)
    d_alpha = np.sum(dout * cache.x_hat, axis=axes)
    d_beta = np.sum(dout, axis=axes)
    d_xhat = dout * _broadcast(cache.alpha, ndim)
    inv = _broadcast(cache.inv_std, ndim)
    if mode == MODE_FROZEN:
        return d_xhat * inv, d_alpha, d_beta

    m = dout.size // dout.shape[1]
    y = cache.y

    # d/d var_used, then through the clip to the live batch variance
    d_var = np.sum(d_xhat * cache.centered, axis=axes) * (-0.5) * cache.inv_std ** 3
    if cache.clipped is not None:
        d_var = np.where(cache.clipped, 0.0, d_var)
    d_mean = -np.sum(d_xhat, axis=axes) * cache.inv_std
    centered_batch = y - _broadcast(cache.batch_mean, ndim)
    dy = (d_xhat * inv
          + _broadcast(d_var, ndim) * 2.0 * centered_batch / m
          + _broadcast(d_mean, ndim) / m)
    return dy, d_alpha, d_beta
