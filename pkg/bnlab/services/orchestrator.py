"""
Server-side round loop: broadcast, client updates in fixed order, P-weighted
aggregation of weights, running statistics and both control-variate families,
plus the learning-rate schedule, evaluation and the centralized baseline.
"""
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from bnlab.config import ALG_FEDAVG, FULL_PASS_CHUNK
from bnlab.exceptions import ConfigError, DivergenceError, StructuralError
from bnlab.models.algorithm import CORRECTION_FIRST_STEP, AlgorithmSpec
from bnlab.models.dataset import BatchSchedule, Dataset
from bnlab.models.state import ClientState, ControlVariates, RoundReport, ServerState
from bnlab.models.tensors import TensorDict, weighted_sum
from bnlab.services import bn_stats, fl_family, nn_core
from bnlab.services.accounting import FEDTAN_PROTOCOL_PAYLOAD, FEDTAN_ROUNDS_PER_LAYER
from bnlab.services.nn_core import Architecture

logger = logging.getLogger(__name__)

SCHEDULE_CONSTANT = "constant"
SCHEDULE_STEP = "step"
SCHEDULE_MULTISTEP = "multistep"
SCHEDULE_KINDS = (SCHEDULE_CONSTANT, SCHEDULE_STEP, SCHEDULE_MULTISTEP)


@dataclass(frozen=True)
class Schedule:
    kind: str = SCHEDULE_CONSTANT
    base_lr: float = 0.05
    factor: float = 1.0
    milestones: Tuple[int, ...] = ()  # step: milestones[0] is the decay period
    warmup_iters: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule '{self.kind}'", field="schedule.kind")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}", field="schedule.base_lr")
        if not 0.0 < self.factor <= 1.0:
            raise ConfigError(f"factor must lie in (0, 1], got {self.factor}", field="schedule.factor")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing", field="schedule.milestones")
        if self.kind == SCHEDULE_STEP and (not self.milestones or self.milestones[0] <= 0):
            raise ConfigError("step schedule needs a positive period in milestones", field="schedule.milestones")
        if self.warmup_iters < 0:
            raise ConfigError(f"warmup_iters must be >= 0, got {self.warmup_iters}", field="schedule.warmup_iters")


def lr_at(schedule: Schedule, iteration: int) -> float:
    """Decayed rate times the linear warm-up ramp min(1, iteration / warmup_iters)."""
    if iteration < 0:
        raise ConfigError(f"iteration must be >= 0, got {iteration}")
    if schedule.kind == SCHEDULE_MULTISTEP:
        decays = sum(1 for m in schedule.milestones if m <= iteration)
    elif schedule.kind == SCHEDULE_STEP:
        decays = iteration // schedule.milestones[0]
    else:
        decays = 0
    lr = schedule.base_lr * schedule.factor ** decays
    if schedule.warmup_iters > 0:
        lr *= min(1.0, iteration / schedule.warmup_iters)
    return lr


def round_lr(schedule: Schedule, global_step: int, E: int) -> float:
    """Rate held for all E local steps of a global step (iterations counted from 1)."""
    return lr_at(schedule, global_step * E + 1)


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------

def init_server(params: TensorDict, running: TensorDict) -> ServerState:
    return ServerState(params, running, ControlVariates.zeros(params, running))


def make_clients(datasets: Sequence[Dataset], params: TensorDict, running: TensorDict,
                 seeds: Sequence[int], batch_size: int) -> List[ClientState]:
    if len(seeds) != len(datasets):
        raise StructuralError(f"{len(seeds)} seeds for {len(datasets)} clients")
    clients = []
    for client_id, (dataset, seed) in enumerate(zip(datasets, seeds)):
        clients.append(ClientState(
            client_id=client_id,
            weights=params,
            running_stats=running,
            cv=ControlVariates.zeros(params, running),
            dataset=dataset,
            schedule=BatchSchedule(int(seed), len(dataset), batch_size),
        ))
    return clients


def _check_weights(weights: Sequence[float], count: int) -> None:
    if len(weights) != count:
        raise StructuralError(f"{len(weights)} client weights for {count} clients")
    total = float(sum(weights))
    if abs(total - 1.0) > fl_family.WEIGHT_SUM_TOLERANCE:
        raise ConfigError(f"client weights must sum to 1, got {total}", field="partition")


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(trees: Sequence[TensorDict], weights: Sequence[float]) -> TensorDict:
    """sum_i P_i x_i in fixed client order."""
    return weighted_sum(list(trees), [float(w) for w in weights])


def _aggregate_shared(previous: TensorDict, trees: Sequence[TensorDict], weights: Sequence[float],
                      keys: Sequence[str]) -> TensorDict:
    if len(keys) == len(previous):
        return aggregate(trees, weights)
    shared = aggregate([tree.select(keys) for tree in trees], weights)
    return previous.replace(dict(shared.items()))


def upload_payload(arch: Architecture, spec: AlgorithmSpec) -> int:
    """Parameters one client places on the up-link in a global step."""
    traits = spec.traits
    shared = set(fl_family.shared_param_keys(arch, traits))
    shared_w = sum(int(np.prod(shape)) for key, shape in arch.param_shapes() if key in shared)
    payload = shared_w
    if not traits.local_running_stats:
        payload += arch.stats_count
    if traits.uses_c:
        payload += shared_w
    if traits.uses_k:
        payload += arch.stats_count
    if traits.correction == CORRECTION_FIRST_STEP:
        cw, cs = FEDTAN_PROTOCOL_PAYLOAD
        payload += cw * arch.weight_count + cs * arch.stats_count
    return payload


def fedtan_shared_stats(arch: Architecture, global_w: TensorDict, clients: Sequence[ClientState],
                        weights: Sequence[float], global_step: int, E: int,
                        epsilon: float = nn_core.BN_EPSILON) -> TensorDict:
    """Layer-wise shared first-step statistics.

    Every client normalizes layers before l with the already shared statistics,
    reports its batch statistics of layer l, and the P-weighted average becomes
    layer l's shared value.
    """
    pairs = []
    for layer in arch.bn_layers:
        known = bn_stats.make_stats(pairs)
        per_client = []
        for client in clients:
            x, _ = fl_family.first_batch(client, global_step, E)
            y = nn_core.pre_bn_activation(arch, global_w, x, known, layer.name, epsilon)
            mean, var = bn_stats.batch_stats(y)
            per_client.append(bn_stats.make_stats([(layer.name, mean, var)]))
        shared = fl_family.fedtan_first_step_stats(per_client, [float(w) for w in weights])
        pairs.append((layer.name, shared[bn_stats.mean_key(layer.name)], shared[bn_stats.var_key(layer.name)]))
    return bn_stats.make_stats(pairs)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(arch: Architecture, params: TensorDict, running: TensorDict, test_set: Dataset,
             epsilon: float = nn_core.BN_EPSILON, chunk: int = FULL_PASS_CHUNK) -> Tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy with BN in eval mode."""
    if not running.is_finite():
        raise StructuralError("running statistics are not finite")
    n = len(test_set)
    if n == 0:
        raise ConfigError("evaluation set is empty", field="data")
    correct, loss_sum = 0, 0.0
    for start in range(0, n, chunk):
        x = test_set.features[start:start + chunk]
        y = test_set.labels[start:start + chunk]
        logits = nn_core.predict_logits(arch, params, running, x, epsilon)
        loss, _ = nn_core.cross_entropy(logits, y)
        loss_sum += loss * x.shape[0]
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / n, loss_sum / n


def evaluate_round(arch: Architecture, spec: AlgorithmSpec, server: ServerState, clients: Sequence[ClientState],
                   weights: Sequence[float], test_set: Dataset) -> Tuple[float, float]:
    """Global model when it exists, otherwise the P-weighted mean over client models."""
    traits = spec.traits
    if not (traits.local_bn_params or traits.local_running_stats):
        return evaluate(arch, server.global_w, server.global_s, test_set, spec.epsilon)
    local_keys = fl_family.local_param_keys(arch, traits)
    accuracy, loss = 0.0, 0.0
    for client, weight in zip(clients, weights):
        params = fl_family.merge_local(server.global_w, client.weights, local_keys)
        running = client.running_stats if traits.local_running_stats else server.global_s
        acc_i, loss_i = evaluate(arch, params, running, test_set, spec.epsilon)
        accuracy += float(weight) * acc_i
        loss += float(weight) * loss_i
    return accuracy, loss


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------

def run_round(arch: Architecture, server: ServerState, clients: Sequence[ClientState], spec: AlgorithmSpec,
              E: int, schedule: Schedule, weights: Sequence[float],
              test_set: Optional[Dataset] = None) -> Tuple[ServerState, List[ClientState], RoundReport]:
    """One global step: broadcast, E local steps per client, aggregation, accounting."""
    _check_weights(weights, len(clients))
    traits = spec.traits
    global_step = server.round
    lr = round_lr(schedule, global_step, E)

    first_step_stats = None
    if traits.correction == CORRECTION_FIRST_STEP:
        first_step_stats = fedtan_shared_stats(arch, server.global_w, clients, weights, global_step, E, spec.epsilon)

    updated, gradients = [], 0
    for client in clients:
        try:
            new_client, trace = fl_family.client_update(
                arch, client, server.global_w, server.global_s, server.global_cv, spec, E, lr, global_step,
                first_step_stats=first_step_stats,
            )
        except DivergenceError as exc:
            raise exc.with_context(client.client_id, global_step) from exc
        updated.append(new_client)
        gradients += trace.gradients_computed

    shared_keys = fl_family.shared_param_keys(arch, traits)
    global_w = _aggregate_shared(server.global_w, [c.weights for c in updated], weights, shared_keys)
    global_s = server.global_s
    if not traits.local_running_stats:
        global_s = aggregate([c.running_stats for c in updated], weights)
    c = server.global_cv.c
    if traits.uses_c:
        c = _aggregate_shared(c, [cl.cv.c for cl in updated], weights, shared_keys)
    k = server.global_cv.k
    if traits.uses_k:
        k = aggregate([cl.cv.k for cl in updated], weights)

    messages = 2 * len(clients)
    if traits.correction == CORRECTION_FIRST_STEP:
        messages += FEDTAN_ROUNDS_PER_LAYER * arch.depth * len(clients)
    ledger = server.ledger.add(messages, upload_payload(arch, spec), gradients)
    new_server = ServerState(global_w, global_s, ControlVariates(c, k), global_step + 1, ledger)

    accuracy, loss = (None, None)
    if test_set is not None:
        accuracy, loss = evaluate_round(arch, spec, new_server, updated, weights, test_set)
    report = RoundReport(
        round=global_step + 1,
        iteration=(global_step + 1) * E,
        lr=lr,
        client_losses=[cl.train_loss for cl in updated],
        eval_accuracy=accuracy,
        eval_loss=loss,
        comm_rounds=ledger.comm_rounds,
        comm_params=ledger.comm_params,
        gradients=ledger.gradients,
    )
    if accuracy is not None:
        logger.info("%s round %d: lr=%.5g acc=%.4f loss=%.4f", spec.name, report.round, lr, accuracy, loss)
    else:
        logger.debug("%s round %d: lr=%.5g", spec.name, report.round, lr)
    return new_server, updated, report


def run_training(arch: Architecture, server: ServerState, clients: Sequence[ClientState], spec: AlgorithmSpec,
                 E: int, rounds: int, schedule: Schedule, weights: Sequence[float],
                 test_set: Optional[Dataset] = None) -> Iterator[Tuple[ServerState, List[ClientState], RoundReport]]:
    clients = list(clients)
    for _ in range(rounds):
        server, clients, report = run_round(arch, server, clients, spec, E, schedule, weights, test_set)
        yield server, clients, report


@dataclass
class CentralizedTrainer:
    """Single-trainer SGD on the pooled data, reported with the same cadence as a federated run."""
    arch: Architecture
    state: ClientState
    spec: AlgorithmSpec
    round: int = 0
    gradients: int = 0
    _zero_cv: Optional[ControlVariates] = field(default=None, repr=False)

    def __post_init__(self):
        if self.spec.name != ALG_FEDAVG:
            self.spec = replace(self.spec, name=ALG_FEDAVG, t_star=None)
        self._zero_cv = ControlVariates.zeros(self.state.weights, self.state.running_stats)

    def step(self, E: int, schedule: Schedule, test_set: Optional[Dataset] = None) -> RoundReport:
        lr = round_lr(schedule, self.round, E)
        try:
            state, trace = fl_family.client_update(
                self.arch, self.state, self.state.weights, self.state.running_stats, self._zero_cv,
                self.spec, E, lr, self.round,
            )
        except DivergenceError as exc:
            raise exc.with_context(self.state.client_id, self.round) from exc
        self.state = state
        self.round += 1
        self.gradients += trace.gradients_computed
        accuracy, loss = (None, None)
        if test_set is not None:
            accuracy, loss = evaluate(self.arch, state.weights, state.running_stats, test_set, self.spec.epsilon)
            logger.info("Centralized round %d: lr=%.5g acc=%.4f loss=%.4f", self.round, lr, accuracy, loss)
        return RoundReport(
            round=self.round,
            iteration=self.round * E,
            lr=lr,
            client_losses=[state.train_loss],
            eval_accuracy=accuracy,
            eval_loss=loss,
            comm_rounds=Fraction(0),
            comm_params=0,
            gradients=self.gradients,
        )


def train_centralized(arch: Architecture, dataset: Dataset, params: TensorDict, running: TensorDict,
                      spec: AlgorithmSpec, batch_size: int, seed: int, E: int, rounds: int, schedule: Schedule,
                      test_set: Optional[Dataset] = None) -> Iterator[Tuple[ClientState, RoundReport]]:
    """Centralized baseline; pass batch size |B| * N to match a federated run."""
    state = make_clients([dataset], params, running, [seed], batch_size)[0]
    trainer = CentralizedTrainer(arch, state, spec)
    for _ in range(rounds):
        report = trainer.step(E, schedule, test_set)
        yield trainer.state, report
