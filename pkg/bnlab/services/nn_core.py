"""
Network engine: dense-tensor layers with exact manual forward/backward, the
reference architectures, cross-entropy loss and plain SGD.

Parameters live in a TensorDict keyed "<layer>.<param>"; BN scale and shift are
"<bn>.alpha" / "<bn>.beta". Everything statistics-related is delegated to
bn_stats.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bnlab.config import ARCH_CNN, ARCH_LINEAR, ARCH_MLP, BN_EPSILON
from bnlab.exceptions import ConfigError, StructuralError
from bnlab.models.tensors import TensorDict
from bnlab.services import bn_stats

BN_TRAIN = "train"
BN_EVAL = "eval"
BN_INJECTED = "injected"
BN_MODES = (BN_TRAIN, BN_EVAL, BN_INJECTED)


@dataclass
class BNContext:
    """How BN layers pick their statistics during one forward pass.

    train:    live batch statistics; `shift` adds a constant to them and
              `target` replaces them per layer (shift = target - batch), the
              variance is clipped at `var_threshold` when one is given.
    eval / injected: `stats` are used verbatim as constants.
    """
    mode: str
    epsilon: float = BN_EPSILON
    stats: Optional[TensorDict] = None
    shift: Optional[TensorDict] = None
    target: Optional[TensorDict] = None
    var_threshold: Optional[float] = None
    raw_stats: List[Tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)
    used_stats: List[Tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    name: str = ""

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return []

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape

    def forward(self, params: TensorDict, x: np.ndarray, ctx: BNContext) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, params: TensorDict, dout: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features

    def param_shapes(self):
        return [(f"{self.name}.weight", (self.out_features, self.in_features)),
                (f"{self.name}.bias", (self.out_features,))]

    def output_shape(self, input_shape):
        if input_shape != (self.in_features,):
            raise StructuralError(f"{self.name}: expected input {(self.in_features,)}, got {input_shape}")
        return (self.out_features,)

    def forward(self, params, x, ctx):
        w = params[f"{self.name}.weight"]
        b = params[f"{self.name}.bias"]
        return x @ w.T + b, x

    def backward(self, params, dout, cache):
        x = cache
        w = params[f"{self.name}.weight"]
        grads = {f"{self.name}.weight": dout.T @ x, f"{self.name}.bias": dout.sum(axis=0)}
        return dout @ w, grads


class Conv2d(Layer):
    """Stride-1 direct convolution with symmetric zero padding."""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int = 3, padding: int = 1):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = padding

    def param_shapes(self):
        k = self.kernel
        return [(f"{self.name}.weight", (self.out_channels, self.in_channels, k, k)),
                (f"{self.name}.bias", (self.out_channels,))]

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise StructuralError(f"{self.name}: expected ({self.in_channels}, H, W) input, got {input_shape}")
        _, h, w = input_shape
        ho = h + 2 * self.padding - self.kernel + 1
        wo = w + 2 * self.padding - self.kernel + 1
        if ho < 1 or wo < 1:
            raise StructuralError(f"{self.name}: input {input_shape} smaller than kernel")
        return (self.out_channels, ho, wo)

    def forward(self, params, x, ctx):
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))
        w = params[f"{self.name}.weight"]
        b = params[f"{self.name}.bias"]
        out = np.einsum("nchwij,ocij->nohw", windows, w) + b.reshape(1, -1, 1, 1)
        return out, (xp.shape, windows)

    def backward(self, params, dout, cache):
        xp_shape, windows = cache
        w = params[f"{self.name}.weight"]
        grads = {
            f"{self.name}.weight": np.einsum("nohw,nchwij->ocij", dout, windows),
            f"{self.name}.bias": dout.sum(axis=(0, 2, 3)),
        }
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        ho, wo = dout.shape[2], dout.shape[3]
        for i in range(self.kernel):
            for j in range(self.kernel):
                dxp[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", dout, w[:, :, i, j])
        p = self.padding
        dx = dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else dxp
        return dx, grads


class BatchNorm(Layer):
    def __init__(self, name: str, features: int):
        self.name = name
        self.features = features

    def param_shapes(self):
        return [(f"{self.name}.alpha", (self.features,)), (f"{self.name}.beta", (self.features,))]

    def output_shape(self, input_shape):
        if input_shape[0] != self.features:
            raise StructuralError(f"{self.name}: expected {self.features} channels, got {input_shape}")
        return input_shape

    def forward(self, params, x, ctx):
        alpha = params[f"{self.name}.alpha"]
        beta = params[f"{self.name}.beta"]
        mk, vk = bn_stats.mean_key(self.name), bn_stats.var_key(self.name)
        if ctx.mode == BN_TRAIN:
            b_mean, b_var = bn_stats.batch_stats(x)
            ctx.raw_stats.append((self.name, b_mean, b_var))
            layer = TensorDict({mk: b_mean, vk: b_var})
            if ctx.target is not None:
                layer = ctx.target.select([mk, vk])
            elif ctx.shift is not None:
                layer = bn_stats.shift_stats(layer, ctx.shift.select([mk, vk]))
            clipped = None
            if ctx.var_threshold is not None:
                clipped = layer[vk] < ctx.var_threshold
                layer = bn_stats.clip_variance(layer, ctx.var_threshold)
            mean, var = layer[mk], layer[vk]
            ctx.used_stats.append((self.name, mean, var))
            return bn_stats.bn_forward(x, mean, var, alpha, beta, ctx.epsilon, bn_stats.MODE_BATCH,
                                       batch_mean=b_mean, clipped=clipped)
        if ctx.stats is None or mk not in ctx.stats:
            raise StructuralError(f"{self.name}: {ctx.mode} mode needs statistics for this layer")
        mean, var = ctx.stats[mk], ctx.stats[vk]
        ctx.used_stats.append((self.name, mean, var))
        return bn_stats.bn_forward(x, mean, var, alpha, beta, ctx.epsilon, bn_stats.MODE_FROZEN)

    def backward(self, params, dout, cache):
        dx, d_alpha, d_beta = bn_stats.bn_backward(dout, cache, cache.mode)
        return dx, {f"{self.name}.alpha": d_alpha, f"{self.name}.beta": d_beta}


class ReLU(Layer):
    def __init__(self, name: str):
        self.name = name

    def forward(self, params, x, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, dout, cache):
        return dout * cache, {}


class MaxPool2d(Layer):
    """Non-overlapping 2x2 max pooling; ties share the gradient equally."""

    def __init__(self, name: str, size: int = 2):
        self.name = name
        self.size = size

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if h % self.size or w % self.size:
            raise StructuralError(f"{self.name}: spatial dims {h}x{w} not divisible by {self.size}")
        return (c, h // self.size, w // self.size)

    def forward(self, params, x, ctx):
        n, c, h, w = x.shape
        s = self.size
        blocks = x.reshape(n, c, h // s, s, w // s, s)
        out = blocks.max(axis=(3, 5))
        mask = blocks == out[:, :, :, None, :, None]
        return out, (x.shape, mask)

    def backward(self, params, dout, cache):
        shape, mask = cache
        counts = mask.sum(axis=(3, 5), keepdims=True)
        dblocks = mask * (dout[:, :, :, None, :, None] / counts)
        return dblocks.reshape(shape), {}


class Flatten(Layer):
    def __init__(self, name: str):
        self.name = name

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, params, x, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, dout, cache):
        return dout.reshape(cache), {}


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

@dataclass
class Architecture:
    name: str
    input_shape: Tuple[int, ...]
    classes: int
    layers: List[Layer]

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.classes,):
            raise StructuralError(f"{self.name}: output shape {shape} does not match {self.classes} classes")

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [item for layer in self.layers for item in layer.param_shapes()]

    @property
    def bn_layers(self) -> List[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def bn_param_keys(self) -> List[str]:
        return [key for layer in self.bn_layers for key, _ in layer.param_shapes()]

    @property
    def depth(self) -> int:
        """Number of weight layers (dense and convolutional)."""
        return sum(isinstance(layer, (Linear, Conv2d)) for layer in self.layers)

    @property
    def weight_count(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.param_shapes()))

    @property
    def stats_count(self) -> int:
        return 2 * sum(layer.features for layer in self.bn_layers)

    @property
    def bn_affine_count(self) -> int:
        return 2 * sum(layer.features for layer in self.bn_layers)


def mlp(input_shape: Sequence[int], classes: int = 10, hidden: int = 64) -> Architecture:
    """input -> hidden -> BN -> ReLU -> hidden -> BN -> ReLU -> classes."""
    in_features = int(np.prod(input_shape))
    return Architecture(ARCH_MLP, tuple(input_shape), classes, [
        Flatten("flatten"),
        Linear("fc1", in_features, hidden), BatchNorm("bn1", hidden), ReLU("relu1"),
        Linear("fc2", hidden, hidden), BatchNorm("bn2", hidden), ReLU("relu2"),
        Linear("fc3", hidden, classes),
    ])


def small_cnn(input_shape: Sequence[int], classes: int = 10, channels: Tuple[int, int] = (8, 16)) -> Architecture:
    """Two conv + BN + ReLU + 2x2 max-pool blocks followed by a dense classifier."""
    if len(input_shape) != 3:
        raise ConfigError(f"cnn needs (C, H, W) inputs, got {tuple(input_shape)}", field="training.architecture")
    c, h, w = input_shape
    c1, c2 = channels
    return Architecture(ARCH_CNN, tuple(input_shape), classes, [
        Conv2d("conv1", c, c1), BatchNorm("bn1", c1), ReLU("relu1"), MaxPool2d("pool1"),
        Conv2d("conv2", c1, c2), BatchNorm("bn2", c2), ReLU("relu2"), MaxPool2d("pool2"),
        Flatten("flatten"), Linear("fc", c2 * (h // 4) * (w // 4), classes),
    ])


def linear(input_shape: Sequence[int], classes: int = 10) -> Architecture:
    return Architecture(ARCH_LINEAR, tuple(input_shape), classes, [
        Flatten("flatten"), Linear("fc", int(np.prod(input_shape)), classes),
    ])


def build_architecture(name: str, input_shape: Sequence[int], classes: int, hidden: int = 64) -> Architecture:
    if name == ARCH_MLP:
        return mlp(input_shape, classes, hidden)
    if name == ARCH_CNN:
        return small_cnn(input_shape, classes)
    if name == ARCH_LINEAR:
        return linear(input_shape, classes)
    raise ConfigError(f"unknown architecture '{name}'", field="training.architecture")


def init_params(arch: Architecture, seed: int, dtype=np.float64) -> TensorDict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; BN alpha=1, beta=0."""
    rng = np.random.default_rng(seed)
    items = []
    for layer in arch.layers:
        if isinstance(layer, BatchNorm):
            items.append((f"{layer.name}.alpha", np.ones(layer.features, dtype=dtype)))
            items.append((f"{layer.name}.beta", np.zeros(layer.features, dtype=dtype)))
            continue
        shapes = layer.param_shapes()
        if not shapes:
            continue
        w_shape = shapes[0][1]
        bound = 1.0 / np.sqrt(int(np.prod(w_shape[1:])))
        for key, shape in shapes:
            items.append((key, rng.uniform(-bound, bound, size=shape).astype(dtype)))
    return TensorDict(items)


def init_running_stats(arch: Architecture, dtype=np.float64) -> TensorDict:
    """Running mean 0 and variance 1 for every BN layer."""
    return bn_stats.make_stats(
        [(layer.name, np.zeros(layer.features, dtype=dtype), np.ones(layer.features, dtype=dtype))
         for layer in arch.bn_layers]
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    arch_name: str
    param_shapes: List[Tuple[str, Tuple[int, ...]]]
    layer_caches: List[Any]
    logits: np.ndarray
    raw_stats: Optional[TensorDict]


def _check_params(arch: Architecture, params: TensorDict) -> None:
    if params.shapes() != arch.param_shapes():
        raise StructuralError(f"parameters do not match architecture '{arch.name}'")


def _check_batch(arch: Architecture, batch: np.ndarray) -> None:
    if batch.ndim < 1 or tuple(batch.shape[1:]) != tuple(arch.input_shape):
        raise StructuralError(f"batch shape {batch.shape} does not match input {arch.input_shape}")


def forward(arch: Architecture, params: TensorDict, batch: np.ndarray, bn_mode: str = BN_TRAIN,
            injected_stats: Optional[TensorDict] = None, *, epsilon: float = BN_EPSILON,
            stats_shift: Optional[TensorDict] = None, stats_target: Optional[TensorDict] = None,
            var_threshold: Optional[float] = None) -> Tuple[np.ndarray, ForwardCache, TensorDict]:
    """Run the network; returns (logits, cache, statistics used for normalization).

    train mode returns the statistics actually used (batch statistics after any
    shift/target/clip); the raw batch statistics stay on cache.raw_stats.
    eval mode expects the running statistics as `injected_stats` and returns an
    empty statistics vector. injected mode uses `injected_stats` verbatim.
    """
    if bn_mode not in BN_MODES:
        raise StructuralError(f"unknown BN mode '{bn_mode}'")
    if bn_mode == BN_TRAIN and injected_stats is not None:
        raise StructuralError("train mode takes no injected statistics")
    if bn_mode != BN_TRAIN and injected_stats is None and arch.bn_layers:
        raise StructuralError(f"{bn_mode} mode needs statistics")
    _check_params(arch, params)
    _check_batch(arch, batch)
    ctx = BNContext(mode=bn_mode, epsilon=epsilon, stats=injected_stats, shift=stats_shift,
                    target=stats_target, var_threshold=var_threshold)
    x = batch
    caches = []
    for layer in arch.layers:
        x, cache = layer.forward(params, x, ctx)
        caches.append(cache)
    raw = bn_stats.make_stats(ctx.raw_stats) if bn_mode == BN_TRAIN else None
    used = TensorDict() if bn_mode == BN_EVAL else bn_stats.make_stats(ctx.used_stats)
    return x, ForwardCache(arch.name, arch.param_shapes(), caches, x, raw), used


def cross_entropy(logits: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy via a log-sum-exp shift; returns (loss, d loss / d logits)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    loss = -float(np.mean(log_probs[np.arange(n), target]))
    grad = exp / sum_exp
    grad[np.arange(n), target] -= 1.0
    return loss, grad / n


def backward(arch: Architecture, params: TensorDict, cache: ForwardCache,
             target: np.ndarray) -> Tuple[TensorDict, float]:
    """Exact gradient of the mean cross-entropy w.r.t. every parameter."""
    if cache.arch_name != arch.name or cache.param_shapes != params.shapes() \
            or len(cache.layer_caches) != len(arch.layers):
        raise StructuralError("forward cache does not belong to this model")
    target = np.asarray(target)
    if target.shape != (cache.logits.shape[0],):
        raise StructuralError(f"target shape {target.shape} does not match batch of {cache.logits.shape[0]}")
    loss, dout = cross_entropy(cache.logits, target)
    grads: Dict[str, np.ndarray] = {}
    for layer, layer_cache in zip(reversed(arch.layers), reversed(cache.layer_caches)):
        dout, layer_grads = layer.backward(params, dout, layer_cache)
        grads.update(layer_grads)
    return TensorDict((key, grads[key]) for key, _ in arch.param_shapes()), loss


def sgd_step(params: TensorDict, grad: TensorDict, correction: TensorDict, lr: float) -> TensorDict:
    """w - lr * (grad + correction); a zero correction is plain SGD."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}", field="schedule.base_lr")
    params.check_congruent(grad, "parameters and gradient")
    params.check_congruent(correction, "parameters and correction")
    return params - (grad + correction) * lr


def pre_bn_activation(arch: Architecture, params: TensorDict, batch: np.ndarray, stats: TensorDict,
                      bn_name: str, epsilon: float = BN_EPSILON) -> np.ndarray:
    """Input of BN layer `bn_name`, earlier BN layers normalized with `stats` as constants."""
    _check_params(arch, params)
    _check_batch(arch, batch)
    ctx = BNContext(mode=BN_INJECTED, epsilon=epsilon, stats=stats)
    x = batch
    for layer in arch.layers:
        if layer.name == bn_name:
            return x
        x, _ = layer.forward(params, x, ctx)
    raise StructuralError(f"no BN layer named '{bn_name}'")


def predict_logits(arch: Architecture, params: TensorDict, running: TensorDict, batch: np.ndarray,
                   epsilon: float = BN_EPSILON) -> np.ndarray:
    logits, _, _ = forward(arch, params, batch, BN_EVAL, running, epsilon=epsilon)
    return logits
