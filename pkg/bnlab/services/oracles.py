"""
Brute-force checks that gate every experiment: finite-difference gradients,
the closed-form control-variate recursions against their definitional sums,
homogeneous collapse, centralized equality, aggregation and cost accounting.

Each check returns an OracleReport; run_oracle_suite collects them and can
write them as JSON lines.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from bnlab.config import (
    ALG_BN_SCAFFOLD_2, ALG_FEDAVG, ALG_FIXBN, ALG_FIXBN_SCAFFOLD, ARCH_CNN, ARCH_MLP, FD_STEP,
    FEDERATED_ALGORITHMS, TOL_AGGREGATION, TOL_GRADIENT, TOL_RECURSION,
)
from bnlab.exceptions import GateFailure, StructuralError
from bnlab.models.algorithm import AlgorithmSpec
from bnlab.models.dataset import Dataset, PartitionPlan
from bnlab.models.state import ClientState, ControlVariates
from bnlab.models.tensors import TensorDict
from bnlab.services import accounting, data_partition, fl_family, nn_core, orchestrator
from bnlab.services.nn_core import BN_TRAIN, Architecture

logger = logging.getLogger(__name__)


@dataclass
class OracleReport:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    witness: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(cls, name: str, error: float, tolerance: float, witness: Optional[Dict[str, Any]] = None):
        error = float(error)
        passed = bool(np.isfinite(error) and error <= tolerance)
        return cls(name, error, tolerance, passed, witness or {})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _worst_entry(a: TensorDict, b: TensorDict) -> Dict[str, Any]:
    a.check_congruent(b, "compared trees")
    worst = {"key": None, "index": None, "left": None, "right": None, "error": 0.0}
    for key, left in a.items():
        if not left.size:
            continue
        diff = np.abs(left.astype(np.float64) - b[key].astype(np.float64))
        flat = int(np.argmax(diff))
        if diff.flat[flat] > worst["error"] or worst["key"] is None:
            worst = {"key": key, "index": list(np.unravel_index(flat, left.shape)),
                     "left": float(left.flat[flat]), "right": float(b[key].flat[flat]),
                     "error": float(diff.flat[flat])}
    return worst


# ---------------------------------------------------------------------------
# Recursion identities
# ---------------------------------------------------------------------------

def check_c_recursion(grads: Sequence[TensorDict], E: int, lr: float, c_prev_local: TensorDict,
                      c_prev_global: TensorDict, w_start: TensorDict, w_end: TensorDict,
                      tolerance: float = TOL_RECURSION, name: str = "c_recursion") -> OracleReport:
    """Recursive c_i against the mean of the E local gradients."""
    if len(grads) != E:
        raise StructuralError(f"gradient trace has {len(grads)} entries, expected {E}")
    definitional = grads[0]
    for grad in grads[1:]:
        definitional = definitional + grad
    definitional = definitional / E
    recursive = fl_family.update_c_option2(c_prev_local, c_prev_global, w_start, w_end, E, lr)
    worst = _worst_entry(recursive, definitional)
    return OracleReport.build(name, worst["error"], tolerance, {"E": E, "lr": lr, "worst": worst})


def geometric_average(trace: Sequence[TensorDict], rho: float) -> TensorDict:
    """(1 - rho) / (1 - rho^E) * sum_t rho^(E-1-t) s_t."""
    E = len(trace)
    scale = (1.0 - rho) / (1.0 - rho ** E)
    total = trace[0] * (scale * rho ** (E - 1))
    for t in range(1, E):
        total = total + trace[t] * (scale * rho ** (E - 1 - t))
    return total


def check_k_recursion(stats_trace: Sequence[TensorDict], E: int, rho: float, k_prev_local: TensorDict,
                      k_prev_global: TensorDict, running_start: TensorDict, running_trace: Sequence[TensorDict],
                      global_start: Optional[TensorDict] = None, tolerance: float = TOL_RECURSION,
                      name: str = "k_recursion") -> OracleReport:
    """Recursive k_i against k_i - k + the geometric average of the statistics fed to the running estimate.

    Also tries the alternative running-statistics indexings and names the ones
    that satisfy the identity.
    """
    if len(stats_trace) != E:
        raise StructuralError(f"statistics trace has {len(stats_trace)} entries, expected {E}")
    if len(running_trace) != E + 1:
        raise StructuralError(f"running trace has {len(running_trace)} entries, expected {E + 1}")
    definitional = (k_prev_local - k_prev_global) + geometric_average(stats_trace, rho)
    starts = {"start=client": running_start}
    if global_start is not None:
        starts["start=global"] = global_start
    candidates = {}
    for end_label, end_index in (("end=E", E), ("end=E-1", E - 1)):
        for start_label, start in starts.items():
            value = fl_family.update_k_option2(k_prev_local, k_prev_global, start, running_trace[end_index], E, rho)
            candidates[f"{end_label},{start_label}"] = value.max_abs_diff(definitional)
    canonical = fl_family.update_k_option2(k_prev_local, k_prev_global, running_start, running_trace[E], E, rho)
    worst = _worst_entry(canonical, definitional)
    satisfied = [label for label, error in candidates.items() if error <= tolerance]
    return OracleReport.build(name, worst["error"], tolerance, {
        "E": E, "rho": rho, "worst": worst, "indexing": candidates, "satisfied": satisfied,
    })


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _activation_pattern(cache: nn_core.ForwardCache) -> List[np.ndarray]:
    pattern = []
    for layer_cache in cache.layer_caches:
        if isinstance(layer_cache, np.ndarray) and layer_cache.dtype == bool:
            pattern.append(layer_cache)
        elif isinstance(layer_cache, tuple) and len(layer_cache) == 2 and isinstance(layer_cache[1], np.ndarray) \
                and layer_cache[1].dtype == bool:
            pattern.append(layer_cache[1])
    return pattern


def _loss_and_pattern(arch, params, batch, targets, bn_mode, injected):
    logits, cache, _ = nn_core.forward(arch, params, batch, bn_mode, injected)
    loss, _ = nn_core.cross_entropy(logits, targets)
    return loss, _activation_pattern(cache)


def _select_coordinates(params: TensorDict, max_coords: int, seed: int) -> List[Tuple[str, int]]:
    coords = [(key, i) for key, value in params.items() for i in range(value.size)]
    if len(coords) <= max_coords:
        return coords
    rng = np.random.default_rng(seed)
    chosen = set(int(i) for i in rng.choice(len(coords), size=max_coords, replace=False))
    offset = 0
    for key, value in params.items():
        if not any(offset <= i < offset + value.size for i in chosen):
            chosen.add(offset + int(rng.integers(value.size)))
        offset += value.size
    return [coords[i] for i in sorted(chosen)]


def check_gradients(arch: Architecture, params: TensorDict, batch: np.ndarray, targets: np.ndarray,
                    h: float = FD_STEP, *, bn_mode: str = BN_TRAIN, injected_stats: Optional[TensorDict] = None,
                    max_coords: int = 400, seed: int = 0, tolerance: float = TOL_GRADIENT,
                    name: str = "gradients") -> OracleReport:
    """Central differences against the analytic gradient.

    Error is ||analytic - numeric|| / max(1, ||analytic||) over the checked
    coordinates. Coordinates whose perturbation flips a ReLU or max-pool choice
    sit on a kink and are skipped (counted in the witness).
    """
    _, cache, _ = nn_core.forward(arch, params, batch, bn_mode, injected_stats)
    analytic, _ = nn_core.backward(arch, params, cache, targets)
    base_pattern = _activation_pattern(cache)

    exact, numeric, skipped, labels = [], [], 0, []
    for key, index in _select_coordinates(params, max_coords, seed):
        values = []
        on_kink = False
        for sign in (1.0, -1.0):
            arr = np.array(params[key], copy=True)
            arr.flat[index] += sign * h
            loss, pattern = _loss_and_pattern(arch, params.replace({key: arr}), batch, targets, bn_mode, injected_stats)
            on_kink = on_kink or any(not np.array_equal(a, b) for a, b in zip(pattern, base_pattern))
            values.append(loss)
        if on_kink:
            skipped += 1
            continue
        exact.append(float(analytic[key].flat[index]))
        numeric.append((values[0] - values[1]) / (2.0 * h))
        labels.append((key, index))

    exact_v, numeric_v = np.asarray(exact), np.asarray(numeric)
    if exact_v.size == 0:
        return OracleReport.build(name, float("nan"), tolerance, {"checked": 0, "skipped": skipped})
    error = np.linalg.norm(exact_v - numeric_v) / max(1.0, np.linalg.norm(exact_v))
    worst = int(np.argmax(np.abs(exact_v - numeric_v)))
    return OracleReport.build(name, error, tolerance, {
        "architecture": arch.name, "bn_mode": bn_mode, "h": h, "checked": int(exact_v.size), "skipped": skipped,
        "worst": {"key": labels[worst][0], "index": labels[worst][1],
                  "analytic": exact[worst], "numeric": numeric[worst]},
    })


# ---------------------------------------------------------------------------
# Whole-run checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyProblem:
    classes: int = 3
    samples_per_class: int = 8
    dims: int = 6
    hidden: int = 5
    spread: float = 0.5
    batch_size: int = 4
    seed: int = 0


def toy_dataset(problem: ToyProblem) -> Dataset:
    return data_partition.gen_synthetic(problem.classes, problem.samples_per_class, problem.dims,
                                        problem.spread, problem.seed)


def toy_model(problem: ToyProblem, arch_name: str = ARCH_MLP) -> Tuple[Architecture, TensorDict, TensorDict]:
    arch = nn_core.build_architecture(arch_name, (problem.dims,), problem.classes, hidden=problem.hidden)
    return arch, nn_core.init_params(arch, problem.seed + 1), nn_core.init_running_stats(arch)


@dataclass(frozen=True)
class CollapseConfig:
    clients: int = 2
    local_steps: int = 3
    rounds: int = 4
    settle_round: int = 2
    lr: float = 0.05
    seed: int = 0
    permute_client: Optional[int] = None  # give this client its own batch order
    # 0 keeps the floor inactive, so the corrected statistics equal the batch ones
    var_threshold: float = 0.0


def _federated_run(arch, params, running, datasets, seeds, spec, E, rounds, lr, batch_size):
    server = orchestrator.init_server(params, running)
    clients = orchestrator.make_clients(datasets, params, running, seeds, batch_size)
    weights = data_partition.client_probabilities(datasets)
    schedule = orchestrator.Schedule(base_lr=lr)
    history = []
    for server, clients, _ in orchestrator.run_training(arch, server, clients, spec, E, rounds, schedule, weights):
        history.append((server, clients))
    return history, weights


def check_homogeneous_collapse(config: CollapseConfig = CollapseConfig(),
                               problem: ToyProblem = ToyProblem()) -> OracleReport:
    """Identical clients: corrections vanish and BN-SCAFFOLD-II follows FedAvg bit for bit.

    Passing needs both control-variate gaps within TOL_AGGREGATION from settle_round on and a
    bit-identical global trajectory; a deviation smaller than the tolerance still fails.
    """
    data = toy_dataset(problem)
    arch, params, running = toy_model(problem)
    seeds = [problem.seed + 100] * config.clients
    if config.permute_client is not None:
        seeds[config.permute_client] = problem.seed + 101
    datasets = [data] * config.clients
    corrected, _ = _federated_run(arch, params, running, datasets, seeds,
                                  AlgorithmSpec(ALG_BN_SCAFFOLD_2, var_threshold=config.var_threshold),
                                  config.local_steps, config.rounds, config.lr, problem.batch_size)
    plain, _ = _federated_run(arch, params, running, datasets, seeds, AlgorithmSpec(ALG_FEDAVG),
                              config.local_steps, config.rounds, config.lr, problem.batch_size)
    gap, witness_round, bit_identical, trajectory = 0.0, None, True, 0.0
    for r, ((server, clients), (plain_server, _)) in enumerate(zip(corrected, plain), start=1):
        same = server.global_w.equals(plain_server.global_w) and server.global_s.equals(plain_server.global_s)
        if not same:
            bit_identical = False
            trajectory = max(trajectory, server.global_w.max_abs_diff(plain_server.global_w),
                             server.global_s.max_abs_diff(plain_server.global_s))
        if r < config.settle_round:
            continue
        for client in clients:
            c_gap = (client.cv.c - server.global_cv.c).norm()
            k_gap = (client.cv.k - server.global_cv.k).norm()
            if max(c_gap, k_gap) > gap:
                gap, witness_round = max(c_gap, k_gap), {"round": r, "client": client.client_id,
                                                         "c_gap": c_gap, "k_gap": k_gap}
    report = OracleReport.build("homogeneous_collapse", max(gap, trajectory), TOL_AGGREGATION, {
        "clients": config.clients, "E": config.local_steps, "rounds": config.rounds,
        "bit_identical": bit_identical, "trajectory_diff": trajectory, "worst": witness_round,
        "permuted_client": config.permute_client, "var_threshold": config.var_threshold,
    })
    report.passed = report.passed and bit_identical
    return report


def check_centralized_equality(iterations: int = 100, E: int = 5, clients: int = 2,
                               problem: ToyProblem = ToyProblem(), lr: float = 0.05) -> OracleReport:
    """Duplicated-data FedAvg against one trainer seeing the same batches."""
    data = toy_dataset(problem)
    arch, params, running = toy_model(problem)
    seed = problem.seed + 200
    rounds = iterations // E
    spec = AlgorithmSpec(ALG_FEDAVG)
    history, _ = _federated_run(arch, params, running, [data] * clients, [seed] * clients, spec, E, rounds, lr,
                                problem.batch_size)
    schedule = orchestrator.Schedule(base_lr=lr)
    error = 0.0
    central = orchestrator.train_centralized(arch, data, params, running, spec, problem.batch_size, seed, E,
                                             rounds, schedule)
    for (server, _), (state, _) in zip(history, central):
        error = max(error, server.global_w.max_abs_diff(state.weights),
                    server.global_s.max_abs_diff(state.running_stats))
    return OracleReport.build("centralized_equality", error, TOL_RECURSION,
                              {"iterations": rounds * E, "E": E, "clients": clients})


def check_aggregation_identity(rounds: int = 3, E: int = 3, problem: ToyProblem = ToyProblem()) -> OracleReport:
    """Global control variates equal the plain P-weighted sums of the client values."""
    data = toy_dataset(problem)
    parts = data_partition.partition_label_skew(data, PartitionPlan(3, 0.8, seed=problem.seed))
    arch, params, running = toy_model(problem)
    history, weights = _federated_run(arch, params, running, parts, [problem.seed + i for i in range(3)],
                                      AlgorithmSpec(ALG_BN_SCAFFOLD_2), E, rounds, 0.05, problem.batch_size)
    error = 0.0
    for server, clients in history:
        for attr in ("c", "k"):
            direct = None
            for client, weight in zip(clients, weights):
                term = getattr(client.cv, attr) * float(weight)
                direct = term if direct is None else direct + term
            error = max(error, getattr(server.global_cv, attr).max_abs_diff(direct))
    return OracleReport.build("aggregation_identity", error, TOL_AGGREGATION, {"rounds": rounds, "E": E})


def check_accounting(clients_grid: Sequence[int] = (2, 5), steps_grid: Sequence[int] = (1, 10, 100),
                     problem: ToyProblem = ToyProblem(samples_per_class=4, dims=4, hidden=3)) -> OracleReport:
    """Measured ledgers of one global step against the closed forms, for every algorithm."""
    arch, params, running = toy_model(problem)
    counts = accounting.model_counts(arch)
    mismatches, checked = [], 0
    for N in clients_grid:
        data = data_partition.gen_synthetic(problem.classes, problem.samples_per_class * N, problem.dims,
                                            problem.spread, problem.seed)
        parts = [data.subset(np.arange(i, len(data), N)) for i in range(N)]
        dataset_size = sum(len(p) for p in parts)
        for E in steps_grid:
            for name in FEDERATED_ALGORITHMS:
                t_star = E // 2 if name in (ALG_FIXBN, ALG_FIXBN_SCAFFOLD) else None
                spec = AlgorithmSpec(name, t_star=t_star, var_threshold=0.0)
                history, _ = _federated_run(arch, params, running, parts, list(range(N)), spec, E, 1, 0.01,
                                            problem.batch_size)
                ledger = history[-1][0].ledger
                rounds, params_sent = accounting.account_communication(
                    name, N, E, counts["W"], counts["S"], counts["depth"], E, counts["A"])
                grads = accounting.account_gradients(name, N, problem.batch_size, dataset_size, E) * E
                checked += 1
                if (ledger.comm_rounds, ledger.comm_params, ledger.gradients) != (rounds, params_sent, grads):
                    mismatches.append({"algorithm": name, "N": N, "E": E,
                                       "measured": [str(ledger.comm_rounds), ledger.comm_params, ledger.gradients],
                                       "formula": [str(rounds), params_sent, str(grads)]})
    return OracleReport.build("accounting", float(len(mismatches)), 0.0,
                              {"checked": checked, "mismatches": mismatches[:5]})


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

def _random_cv(params: TensorDict, stats: TensorDict, rng: np.random.Generator, scale: float) -> ControlVariates:
    c = params.map(lambda v: scale * rng.standard_normal(v.shape))
    k = stats.map(lambda v: scale * rng.standard_normal(v.shape))
    return ControlVariates(c, k)


def _recursion_round(E: int, rho: float, seed: int) -> Tuple[ClientState, ControlVariates, Any, TensorDict,
                                                             TensorDict, Architecture]:
    """One BN-SCAFFOLD-II client step from random control variates, trace kept."""
    problem = ToyProblem(seed=seed)
    data = toy_dataset(problem)
    arch, params, running = toy_model(problem)
    rng = np.random.default_rng(seed + 7)
    client = orchestrator.make_clients([data], params, running, [seed], problem.batch_size)[0]
    client = ClientState(client.client_id, params, running, _random_cv(params, running, rng, 0.01),
                         client.dataset, client.schedule)
    global_cv = _random_cv(params, running, rng, 0.01)
    spec = AlgorithmSpec(ALG_BN_SCAFFOLD_2, rho=rho, var_threshold=0.0)
    new_client, trace = fl_family.client_update(arch, client, params, running, global_cv, spec, E, 0.05, 0,
                                                keep_trace=True)
    return client, global_cv, trace, new_client.weights, running, arch


def run_recursion_checks(steps: Sequence[int], rhos: Sequence[float], seeds: Sequence[int]) -> List[OracleReport]:
    reports = []
    for E in steps:
        for seed in seeds:
            client, global_cv, trace, w_end, running, arch = _recursion_round(E, 0.9, seed)
            replayed = fl_family.replay_gradients(arch, client.dataset, trace)
            drift = max(a.max_abs_diff(b) for a, b in zip(trace.grads, replayed))
            report = check_c_recursion(replayed, E, 0.05, client.cv.c, global_cv.c, client.weights, w_end,
                                       name=f"c_recursion[E={E},seed={seed}]")
            report.witness["replay_drift"] = drift
            reports.append(report)
        for rho in rhos:
            for seed in seeds:
                client, global_cv, trace, _, running, _ = _recursion_round(E, rho, seed)
                report = check_k_recursion(trace.stats, E, rho, client.cv.k, global_cv.k, trace.running[0],
                                           trace.running, global_start=running,
                                           name=f"k_recursion[E={E},rho={rho},seed={seed}]")
                raw = geometric_average(trace.raw_stats, rho)
                recursive = fl_family.update_k_option2(client.cv.k, global_cv.k, trace.running[0],
                                                       trace.running[E], E, rho)
                report.witness["raw_sum_error"] = recursive.max_abs_diff(raw)
                reports.append(report)
    return reports


def run_gradient_checks(seeds: Sequence[int]) -> List[OracleReport]:
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        problem = ToyProblem(seed=seed)
        arch, params, _ = toy_model(problem, ARCH_MLP)
        batch = rng.standard_normal((8, problem.dims))
        targets = rng.integers(0, problem.classes, 8)
        reports.append(check_gradients(arch, params, batch, targets, seed=seed, name=f"gradients[mlp,seed={seed}]"))

        cnn = nn_core.build_architecture(ARCH_CNN, (1, 8, 8), problem.classes)
        cnn_params = nn_core.init_params(cnn, seed)
        images = rng.standard_normal((4, 1, 8, 8))
        labels = rng.integers(0, problem.classes, 4)
        reports.append(check_gradients(cnn, cnn_params, images, labels, max_coords=200, seed=seed,
                                       name=f"gradients[cnn,seed={seed}]"))
    return reports


def run_oracle_suite(quick: bool = False, report_path: Optional[Path] = None) -> List[OracleReport]:
    """All gates. quick trims the seed counts for use in front of every experiment."""
    grad_seeds = range(3) if quick else range(20)
    rec_seeds = range(2) if quick else range(10)
    reports = run_gradient_checks(grad_seeds)
    reports += run_recursion_checks((1, 2, 5, 10), (0.5, 0.9, 0.99), rec_seeds)
    reports.append(check_homogeneous_collapse())
    reports.append(check_homogeneous_collapse(CollapseConfig(clients=3, local_steps=7)))
    reports.append(check_centralized_equality())
    reports.append(check_aggregation_identity())
    reports.append(check_accounting(steps_grid=(1, 10) if quick else (1, 10, 100)))
    for report in reports:
        log = logger.info if report.passed else logger.warning
        log("[%s] %s error=%.3e tol=%.1e", "PASS" if report.passed else "FAIL", report.name,
            report.max_error, report.tolerance)
    if report_path is not None:
        write_reports(reports, report_path)
    return reports


def write_reports(reports: Sequence[OracleReport], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for report in reports:
            f.write(json.dumps(report.to_dict(), sort_keys=True, default=str) + "\n")
    logger.info("Oracle reports written to %s", path)


def require_gates(reports: Sequence[OracleReport]) -> None:
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise GateFailure(failed)
