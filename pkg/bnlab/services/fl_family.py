"""
Variance-reduction client update shared by every federated algorithm.

One E-step loop serves all methods; an AlgorithmSpec only decides
  - which statistics normalize each local step (live, linearly corrected,
    shared on the first step, or frozen running statistics),
  - how the gradient control variate c_i is refreshed (none, option I, option II),
  - how the statistics control variate k_i is refreshed (none, option I, option II),
  - which BN components the client keeps to itself.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from bnlab.config import FULL_PASS_CHUNK
from bnlab.exceptions import ConfigError, DivergenceError, StructuralError
from bnlab.models.algorithm import (
    CORRECTION_FIRST_STEP, CORRECTION_FREEZE, CORRECTION_LINEAR, AlgorithmSpec, AlgorithmTraits,
)
from bnlab.models.dataset import Dataset
from bnlab.models.state import ClientState, ControlVariates
from bnlab.models.tensors import TensorDict, weighted_sum
from bnlab.services import bn_stats, nn_core
from bnlab.services.nn_core import BN_INJECTED, BN_TRAIN, Architecture

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class StepNormalization:
    """BN inputs of one local step, enough to replay it exactly."""
    mode: str
    injected: Optional[TensorDict] = None
    shift: Optional[TensorDict] = None
    target: Optional[TensorDict] = None
    var_threshold: Optional[float] = None


@dataclass
class LocalTrace:
    batches: List[np.ndarray] = field(default_factory=list)
    norms: List[StepNormalization] = field(default_factory=list)
    stats: List[TensorDict] = field(default_factory=list)      # statistics that normalized step t
    raw_stats: List[TensorDict] = field(default_factory=list)  # live batch statistics of step t
    running: List[TensorDict] = field(default_factory=list)    # running statistics before step 0 .. after step E-1
    losses: List[float] = field(default_factory=list)
    weights: List[TensorDict] = field(default_factory=list)    # kept only with keep_trace
    grads: List[TensorDict] = field(default_factory=list)      # kept only with keep_trace
    gradients_computed: int = 0

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


# ---------------------------------------------------------------------------
# Locality
# ---------------------------------------------------------------------------

def local_param_keys(arch: Architecture, traits: AlgorithmTraits) -> List[str]:
    return arch.bn_param_keys() if traits.local_bn_params else []


def shared_param_keys(arch: Architecture, traits: AlgorithmTraits) -> List[str]:
    local = set(local_param_keys(arch, traits))
    return [key for key, _ in arch.param_shapes() if key not in local]


def merge_local(global_tree: TensorDict, local_tree: TensorDict, keys: Sequence[str]) -> TensorDict:
    """Global values everywhere except `keys`, which come from the client."""
    if not keys:
        return global_tree
    return global_tree.replace({key: local_tree[key] for key in keys})


# ---------------------------------------------------------------------------
# Control-variate rules
# ---------------------------------------------------------------------------

def update_c_option2(c_prev_local: TensorDict, c_prev_global: TensorDict, w_start: TensorDict,
                     w_end: TensorDict, E: int, lr: float) -> TensorDict:
    """c_i - c + (w_start - w_end) / (E * lr): the mean local gradient, with no extra pass."""
    if E < 1:
        raise ConfigError(f"E must be >= 1, got {E}", field="training.local_steps")
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}", field="schedule.base_lr")
    return (c_prev_local - c_prev_global) + (w_start - w_end) / (E * lr)


def update_k_option2(k_prev_local: TensorDict, k_prev_global: TensorDict, running_start: TensorDict,
                     running_end: TensorDict, E: int, rho: float) -> TensorDict:
    """k_i - k + (s_hat_end - rho^E s_hat_start) / (1 - rho^E).

    Equals the (1 - rho) / (1 - rho^E) geometric average of the batch statistics
    fed to the running estimate during the E local steps.
    """
    if E < 1:
        raise ConfigError(f"E must be >= 1, got {E}", field="training.local_steps")
    if not 0.0 < rho < 1.0:
        raise ConfigError(f"recursive k needs 0 < rho < 1, got {rho}", field="algorithm.rho")
    decay = rho ** E
    return (k_prev_local - k_prev_global) + (running_end - running_start * decay) / (1.0 - decay)


def _chunks(size: int, chunk: int):
    if chunk < 1:
        raise ConfigError(f"chunk size must be positive, got {chunk}", field="BNLAB_FULL_PASS_CHUNK")
    for start in range(0, size, chunk):
        yield slice(start, min(start + chunk, size))


def full_dataset_stats(arch: Architecture, params: TensorDict, dataset: Dataset,
                       chunk: int = FULL_PASS_CHUNK, epsilon: float = nn_core.BN_EPSILON) -> TensorDict:
    """BN statistics of the whole dataset treated as one batch.

    Layer by layer: earlier layers are normalized with their full-dataset
    statistics, then a two-pass (mean, then centered squares) stream over
    fixed-size chunks gives the layer's mean and biased variance.
    """
    if len(dataset) == 0:
        raise ConfigError("full-dataset statistics of an empty dataset", field="partition")
    features = dataset.features
    pairs = []
    for layer in arch.bn_layers:
        known = bn_stats.make_stats(pairs)
        total, count = None, 0
        for part in _chunks(len(dataset), chunk):
            y = nn_core.pre_bn_activation(arch, params, features[part], known, layer.name, epsilon)
            axes = bn_stats.reduce_axes(y.ndim)
            block = y.sum(axis=axes)
            total = block if total is None else total + block
            count += y.size // y.shape[1]
        mean = total / count
        squares = None
        for part in _chunks(len(dataset), chunk):
            y = nn_core.pre_bn_activation(arch, params, features[part], known, layer.name, epsilon)
            axes = bn_stats.reduce_axes(y.ndim)
            centered = y - mean.reshape((1, -1) + (1,) * (y.ndim - 2))
            block = np.sum(centered * centered, axis=axes)
            squares = block if squares is None else squares + block
        pairs.append((layer.name, mean, squares / count))
    return bn_stats.make_stats(pairs)


def update_k_option1(arch: Architecture, params: TensorDict, dataset: Dataset,
                     chunk: int = FULL_PASS_CHUNK, epsilon: float = nn_core.BN_EPSILON) -> TensorDict:
    return full_dataset_stats(arch, params, dataset, chunk, epsilon)


def update_c_option1(arch: Architecture, params: TensorDict, dataset: Dataset,
                     full_stats: Optional[TensorDict] = None, chunk: int = FULL_PASS_CHUNK,
                     epsilon: float = nn_core.BN_EPSILON) -> TensorDict:
    """Full local gradient at `params` with the full-dataset statistics held fixed."""
    if len(dataset) == 0:
        raise ConfigError("full gradient of an empty dataset", field="partition")
    if full_stats is None:
        full_stats = full_dataset_stats(arch, params, dataset, chunk, epsilon)
    n = len(dataset)
    total = None
    for part in _chunks(n, chunk):
        x, y = dataset.features[part], dataset.labels[part]
        _, cache, _ = nn_core.forward(arch, params, x, BN_INJECTED, full_stats, epsilon=epsilon)
        grad, _ = nn_core.backward(arch, params, cache, y)
        grad = grad * (x.shape[0] / n)
        total = grad if total is None else total + grad
    return total


def fedtan_first_step_stats(all_client_batch_stats: Sequence[TensorDict], weights: Sequence[float]) -> TensorDict:
    """P-weighted average of the clients' first-step batch statistics."""
    if len(all_client_batch_stats) != len(weights):
        raise StructuralError(f"{len(all_client_batch_stats)} statistics for {len(weights)} weights")
    if abs(float(sum(weights)) - 1.0) > WEIGHT_SUM_TOLERANCE:
        raise ConfigError(f"client weights must sum to 1, got {float(sum(weights))}", field="partition")
    return weighted_sum(list(all_client_batch_stats), weights)


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------

def step_normalization(spec: AlgorithmSpec, step: int, iteration: int, running: TensorDict,
                       shift: Optional[TensorDict], first_step_stats: Optional[TensorDict]) -> StepNormalization:
    correction = spec.traits.correction
    if correction == CORRECTION_LINEAR:
        return StepNormalization(BN_TRAIN, shift=shift, var_threshold=spec.var_threshold)
    if correction == CORRECTION_FIRST_STEP and step == 0:
        if first_step_stats is None:
            raise StructuralError(f"{spec.name} needs the shared first-step statistics")
        return StepNormalization(BN_TRAIN, target=first_step_stats)
    if correction == CORRECTION_FREEZE and iteration >= spec.t_star:
        return StepNormalization(BN_INJECTED, injected=running)
    return StepNormalization(BN_TRAIN)


def _forward_step(arch: Architecture, params: TensorDict, x: np.ndarray, norm: StepNormalization, epsilon: float):
    return nn_core.forward(arch, params, x, norm.mode, norm.injected, epsilon=epsilon,
                           stats_shift=norm.shift, stats_target=norm.target,
                           var_threshold=norm.var_threshold)


def client_update(arch: Architecture, state: ClientState, global_w: TensorDict, global_s: TensorDict,
                  global_cv: ControlVariates, spec: AlgorithmSpec, E: int, lr: float, global_step: int,
                  *, first_step_stats: Optional[TensorDict] = None,
                  keep_trace: bool = False) -> Tuple[ClientState, LocalTrace]:
    """Run E local steps from the broadcast state and refresh (c_i, k_i).

    global_step is 0-based; local iteration t of it is global iteration
    global_step * E + t, which drives both the batch schedule and FixBN's switch.
    """
    if E < 1:
        raise ConfigError(f"E must be >= 1, got {E}", field="training.local_steps")
    traits = spec.traits
    local_keys = local_param_keys(arch, traits)

    w_start = merge_local(global_w, state.weights, local_keys)
    running_start = state.running_stats if traits.local_running_stats else global_s
    c_global = merge_local(global_cv.c, state.cv.c, local_keys)
    correction = c_global - state.cv.c if traits.uses_c else w_start.zeros_like()
    shift = global_cv.k - state.cv.k if traits.correction == CORRECTION_LINEAR else None

    trace = LocalTrace(running=[running_start])
    w, running = w_start, running_start
    for t in range(E):
        iteration = global_step * E + t
        idx = state.schedule.indices(iteration)
        x, y = state.dataset.features[idx], state.dataset.labels[idx]
        norm = step_normalization(spec, t, iteration, running, shift, first_step_stats)
        _, cache, used = _forward_step(arch, w, x, norm, spec.epsilon)
        grad, loss = nn_core.backward(arch, w, cache, y)
        if keep_trace:
            trace.weights.append(w)
            trace.grads.append(grad)
        w = nn_core.sgd_step(w, grad, correction, lr)
        if not (w.is_finite() and np.isfinite(loss)):
            raise DivergenceError(f"non-finite parameters after local step {t}", step=t)
        if norm.mode == BN_TRAIN:
            running = bn_stats.ema_update(running, used, spec.rho)
            trace.raw_stats.append(cache.raw_stats)
        trace.batches.append(idx)
        trace.norms.append(norm)
        trace.stats.append(used)
        trace.running.append(running)
        trace.losses.append(loss)
        trace.gradients_computed += len(idx)
    if keep_trace:
        trace.weights.append(w)

    full_stats = None
    if traits.c_option == 1 or traits.k_option == 1:
        full_stats = full_dataset_stats(arch, w_start, state.dataset, epsilon=spec.epsilon)

    if traits.c_option == 1:
        c_new = update_c_option1(arch, w_start, state.dataset, full_stats, epsilon=spec.epsilon)
        trace.gradients_computed += len(state.dataset)
    elif traits.c_option == 2:
        c_new = update_c_option2(state.cv.c, c_global, w_start, w, E, lr)
    else:
        c_new = state.cv.c

    if traits.k_option == 1:
        k_new = full_stats
    elif traits.k_option == 2:
        k_new = update_k_option2(state.cv.k, global_cv.k, running_start, running, E, spec.rho)
    else:
        k_new = state.cv.k

    new_state = ClientState(
        client_id=state.client_id,
        weights=w,
        running_stats=running,
        cv=ControlVariates(c_new, k_new),
        dataset=state.dataset,
        schedule=state.schedule,
        train_loss=trace.mean_loss,
    )
    return new_state, trace


def replay_gradients(arch: Architecture, dataset: Dataset, trace: LocalTrace,
                     epsilon: float = nn_core.BN_EPSILON) -> List[TensorDict]:
    """Recompute every local gradient from a kept trace (recorded weights, batches, statistics)."""
    if len(trace.weights) != len(trace.batches) + 1:
        raise StructuralError("trace was recorded without keep_trace")
    grads = []
    for w, idx, norm in zip(trace.weights, trace.batches, trace.norms):
        _, cache, _ = _forward_step(arch, w, dataset.features[idx], norm, epsilon)
        grad, _ = nn_core.backward(arch, w, cache, dataset.labels[idx])
        grads.append(grad)
    return grads


def first_batch(state: ClientState, global_step: int, E: int) -> Tuple[np.ndarray, np.ndarray]:
    idx = state.schedule.indices(global_step * E)
    return state.dataset.features[idx], state.dataset.labels[idx]
