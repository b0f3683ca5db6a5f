"""
Experiment service: resolve a config into data, clients and seeds, run the
oracle gates, train, and write rounds.csv / summary.csv / metadata.json.
Sweeps repeat this per axis value and algorithm and collect sweep.csv.
"""
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as scipy_stats

from bnlab.config import (
    ALG_FEDAVG, EXIT_OK, METADATA_JSON, ORACLE_REPORT_NAME, PRECISIONS, ROUNDS_CSV, SUMMARY_CSV, SWEEP_CSV,
)
from bnlab.exceptions import ConfigError, DivergenceError, GateFailure, LabError
from bnlab.models.algorithm import is_centralized
from bnlab.models.dataset import Dataset, PartitionPlan
from bnlab.models.experiment import AXIS_ALIASES, SOURCE_IDX, ExperimentConfig, dump_config, split_field
from bnlab.models.state import RoundReport
from bnlab.services import data_partition, nn_core, oracles, orchestrator

logger = logging.getLogger(__name__)

# Seed streams derived from the master seed
STREAM_DATA = 0
STREAM_TEST = 1
STREAM_FOLDS = 2
STREAM_PARTITION = 3
STREAM_INIT = 4
STREAM_BATCHES = 5

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"
STATUS_FAILED = "failed"

ALGORITHM_FIELD = "algorithm.name"

_gate_cache: Dict[bool, List[oracles.OracleReport]] = {}


@dataclass
class FoldResult:
    fold: int
    final_accuracy: Optional[float] = None
    best_accuracy: Optional[float] = None
    rounds_completed: int = 0
    status: str = STATUS_OK


@dataclass
class ExperimentResult:
    algorithm: str
    out_dir: Path
    folds: List[FoldResult] = field(default_factory=list)
    status: int = EXIT_OK

    @property
    def mean_accuracy(self) -> Optional[float]:
        values = [f.final_accuracy for f in self.folds if f.final_accuracy is not None]
        return float(np.mean(values)) if values else None


def derive_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([master, *path]).generate_state(1)[0])


def t_interval(values: Sequence[float], confidence: float = 0.95) -> Optional[Tuple[float, float]]:
    """Two-tailed t-interval of the mean; None with fewer than two values."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 2:
        return None
    mean = float(values.mean())
    sem = float(values.std(ddof=1)) / math.sqrt(n)
    h = sem * float(scipy_stats.t.ppf((1 + confidence) / 2, n - 1))
    return mean - h, mean + h


# ---------------------------------------------------------------------------
# Resolution
# ---------------------------------------------------------------------------

def seed_tree(config: ExperimentConfig) -> Dict[str, Any]:
    master = config.training.seed
    folds = max(1, config.training.folds)
    tree = {
        "master": master,
        "data": derive_seed(master, STREAM_DATA),
        "test": derive_seed(master, STREAM_TEST),
        "folds": derive_seed(master, STREAM_FOLDS),
        "per_fold": [],
    }
    for fold in range(folds):
        partition = config.partition.seed if config.partition.seed is not None \
            else derive_seed(master, STREAM_PARTITION, fold)
        tree["per_fold"].append({
            "partition": partition,
            "init": derive_seed(master, STREAM_INIT, fold),
            "batches": [derive_seed(master, STREAM_BATCHES, fold, i) for i in range(config.partition.clients)],
        })
    return tree


def load_datasets(config: ExperimentConfig, seeds: Dict[str, Any]) -> Tuple[Dataset, Optional[Dataset]]:
    d = config.data
    if d.source == SOURCE_IDX:
        pool = data_partition.load_idx(d.train_images, d.train_labels, d.normalization, d.classes, d.limit)
        test = None
        if d.test_images and d.test_labels:
            test = data_partition.load_idx(d.test_images, d.test_labels, d.normalization, d.classes)
        return pool, test
    pool = data_partition.gen_synthetic(d.classes, d.samples_per_class, d.dims, d.spread, seeds["data"],
                                        d.scale, d.image_shape, name="synthetic-train",
                                        group_shift=d.group_shift)
    if d.limit is not None:
        pool = pool.subset(np.arange(min(d.limit, len(pool))))
    test = data_partition.gen_synthetic(d.classes, d.test_samples_per_class, d.dims, d.spread, seeds["test"],
                                        d.scale, d.image_shape, name="synthetic-test",
                                        group_shift=d.group_shift)
    return pool, test


def fold_plan(config: ExperimentConfig, pool: Dataset, test: Optional[Dataset],
              seeds: Dict[str, Any]) -> List[Tuple[int, Dataset, Dataset]]:
    """(fold, training pool, evaluation set); folds are cut before the label-skew partition."""
    if config.training.folds < 2:
        if test is None:
            raise ConfigError("no evaluation set", field="data.test_images")
        return [(0, pool, test)]
    splits = data_partition.kfold_splits(len(pool), config.training.folds, seeds["folds"])
    return [(k, pool.subset(train), pool.subset(valid)) for k, (train, valid) in enumerate(splits)]


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _round_fields(clients: int) -> List[str]:
    return (["fold", "round", "iteration", "lr"]
            + [f"loss_client_{i}" for i in range(clients)]
            + ["eval_accuracy", "eval_loss", "comm_rounds", "comm_params", "gradients", "status"])


def _round_row(fold: int, report: RoundReport) -> Dict[str, Any]:
    row = {
        "fold": fold,
        "round": report.round,
        "iteration": report.iteration,
        "lr": repr(report.lr),
        "eval_accuracy": "" if report.eval_accuracy is None else repr(report.eval_accuracy),
        "eval_loss": "" if report.eval_loss is None else repr(report.eval_loss),
        "comm_rounds": str(report.comm_rounds),
        "comm_params": report.comm_params,
        "gradients": report.gradients,
        "status": STATUS_OK,
    }
    for i, loss in enumerate(report.client_losses):
        row[f"loss_client_{i}"] = repr(loss)
    return row


def write_summary(path: Path, folds: Sequence[FoldResult]) -> None:
    fieldnames = ["fold", "final_accuracy", "best_accuracy", "rounds", "status", "ci_low", "ci_high"]
    finals = [f.final_accuracy for f in folds if f.final_accuracy is not None]
    bests = [f.best_accuracy for f in folds if f.best_accuracy is not None]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for f in folds:
            writer.writerow({
                "fold": f.fold,
                "final_accuracy": "" if f.final_accuracy is None else repr(f.final_accuracy),
                "best_accuracy": "" if f.best_accuracy is None else repr(f.best_accuracy),
                "rounds": f.rounds_completed,
                "status": f.status,
                "ci_low": "",
                "ci_high": "",
            })
        interval = t_interval(finals)
        writer.writerow({
            "fold": "mean",
            "final_accuracy": repr(float(np.mean(finals))) if finals else "",
            "best_accuracy": repr(float(np.mean(bests))) if bests else "",
            "rounds": "",
            "status": "",
            "ci_low": "" if interval is None else repr(interval[0]),
            "ci_high": "" if interval is None else repr(interval[1]),
        })


def write_metadata(path: Path, config: ExperimentConfig, seeds: Dict[str, Any], gates: Optional[str]) -> None:
    metadata = {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "algorithm": config.algorithm.name,
        "config": config.to_dict(),
        "config_toml": dump_config(config),
        "rounds": config.rounds,
        "iterations": config.iterations,
        "seeds": seeds,
        "oracle_gates": gates,
        "notes": {
            "folds": "cut before the label-skew partition of each training split",
            "evaluation": "once per global step, BN in eval mode",
            "learning_rate": "held for the E local steps of a global step at lr(r*E + 1)",
            "k_recursion_indexing": "running statistics after local step E, start = round-start value",
            "centralized_batch": "batch_size * clients",
        },
        "numpy": np.__version__,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2, default=str)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def run_gates(out_dir: Optional[Path], override_gates: bool, quick: bool = True) -> str:
    """Run (or reuse) the oracle suite; returns "passed", "overridden" or raises GateFailure."""
    if quick not in _gate_cache:
        path = Path(out_dir) / ORACLE_REPORT_NAME if out_dir is not None else None
        _gate_cache[quick] = oracles.run_oracle_suite(quick=quick, report_path=path)
    reports = _gate_cache[quick]
    try:
        oracles.require_gates(reports)
    except GateFailure as exc:
        if not override_gates:
            raise
        logger.warning("Gates overridden: %s", ", ".join(exc.failed))
        return "overridden"
    return "passed"


def _run_fold(config: ExperimentConfig, fold: int, train: Dataset, eval_set: Dataset,
              fold_seeds: Dict[str, Any], writer: csv.DictWriter) -> FoldResult:
    t = config.training
    dtype = PRECISIONS[t.precision]
    N = config.partition.clients
    arch = nn_core.build_architecture(t.architecture, train.input_shape, train.class_count, t.hidden)
    params = nn_core.init_params(arch, fold_seeds["init"], dtype)
    running = nn_core.init_running_stats(arch, dtype)
    eval_set = eval_set.astype(dtype)
    schedule = orchestrator.Schedule(config.schedule.kind, config.schedule.base_lr, config.schedule.factor,
                                     tuple(config.schedule.milestones), config.schedule.warmup_iters)
    E, R = t.local_steps, config.rounds

    if is_centralized(config.algorithm.name):
        spec = config.algorithm_spec(ALG_FEDAVG)
        progress = ((None, report) for _, report in orchestrator.train_centralized(
            arch, train.astype(dtype), params, running, spec, t.batch_size * N, fold_seeds["batches"][0],
            E, R, schedule, eval_set))
    else:
        plan = PartitionPlan(N, config.partition.p, fold_seeds["partition"])
        parts = [part.astype(dtype) for part in data_partition.partition_label_skew(train, plan)]
        for i, part in enumerate(parts):
            if len(part) == 0:
                raise ConfigError(f"client {i} received no samples", field="partition.p")
        weights = data_partition.client_probabilities(parts)
        spec = config.algorithm_spec()
        server = orchestrator.init_server(params, running)
        clients = orchestrator.make_clients(parts, params, running, fold_seeds["batches"], t.batch_size)
        for client in clients:
            logger.info("Fold %d client %d: %d samples, batch seed %d", fold, client.client_id, len(client.dataset),
                        client.rng_seed)
        progress = ((None, report) for _, _, report in orchestrator.run_training(
            arch, server, clients, spec, E, R, schedule, weights, eval_set))

    result = FoldResult(fold)
    try:
        for _, report in progress:
            writer.writerow(_round_row(fold, report))
            result.rounds_completed = report.round
            result.final_accuracy = report.eval_accuracy
            if report.eval_accuracy is not None:
                result.best_accuracy = max(result.best_accuracy or 0.0, report.eval_accuracy)
    except DivergenceError:
        writer.writerow({"fold": fold, "round": result.rounds_completed + 1, "status": STATUS_DIVERGED})
        result.status = STATUS_DIVERGED
        raise
    return result


def run_experiment(config: ExperimentConfig, out_dir: Optional[Path] = None, override_gates: bool = False,
                   gates: bool = True) -> ExperimentResult:
    """Train every fold and write rounds.csv, summary.csv and metadata.json under out_dir."""
    out_dir = Path(out_dir or config.output.directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    gate_status = run_gates(out_dir, override_gates) if gates else None

    seeds = seed_tree(config)
    pool, test = load_datasets(config, seeds)
    plan = fold_plan(config, pool, test, seeds)
    result = ExperimentResult(config.algorithm.name, out_dir)
    logger.info("Running %s: %d fold(s), R=%d, E=%d, N=%d, p=%s -> %s", config.algorithm.name, len(plan),
                config.rounds, config.training.local_steps, config.partition.clients, config.partition.p, out_dir)

    write_metadata(out_dir / METADATA_JSON, config, seeds, gate_status)
    with open(out_dir / ROUNDS_CSV, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_round_fields(config.partition.clients), restval="")
        writer.writeheader()
        for fold, train, eval_set in plan:
            try:
                result.folds.append(_run_fold(config, fold, train, eval_set, seeds["per_fold"][fold], writer))
            except DivergenceError:
                result.folds.append(FoldResult(fold, status=STATUS_DIVERGED))
                write_summary(out_dir / SUMMARY_CSV, result.folds)
                raise
    write_summary(out_dir / SUMMARY_CSV, result.folds)
    logger.info("%s finished: mean final accuracy %s", config.algorithm.name, result.mean_accuracy)
    return result


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def dedupe(values: Iterable[str]) -> List[str]:
    seen, unique = set(), []
    for value in values:
        if value in seen:
            logger.warning("Duplicate sweep value '%s' dropped", value)
            continue
        seen.add(value)
        unique.append(value)
    return unique


def _sweep_task(args) -> Tuple[Any, str, List[Dict[str, Any]]]:
    base, dotted, value, algorithm, sub_dir = args
    rows = []
    try:
        config = base.with_value(dotted, value)
        if dotted != ALGORITHM_FIELD:
            config = config.with_value(ALGORITHM_FIELD, algorithm)
        result = run_experiment(config, sub_dir, gates=False)
        for f in result.folds:
            rows.append({"fold": f.fold, "final_accuracy": f.final_accuracy, "best_accuracy": f.best_accuracy,
                         "status": f.status, "error": ""})
    except LabError as exc:
        logger.error("Sweep point %s=%s %s failed: %s", dotted, value, algorithm, exc)
        status = STATUS_DIVERGED if isinstance(exc, DivergenceError) else STATUS_FAILED
        rows.append({"fold": "", "final_accuracy": None, "best_accuracy": None, "status": status, "error": str(exc)})
    return value, algorithm, rows


def run_sweep(base: ExperimentConfig, axis: str, values: Sequence[str], algorithms: Optional[Sequence[str]] = None,
              out_dir: Optional[Path] = None, override_gates: bool = False, jobs: int = 1,
              gates: bool = True) -> Path:
    """One experiment per (value, algorithm); failures are recorded and the sweep continues.

    On the algorithm axis the values are the algorithms and each runs once under `algorithm=<name>`.
    """
    dotted = AXIS_ALIASES.get(axis, axis)
    values = dedupe(values)
    if not values:
        raise ConfigError("no sweep values", field="--values")
    split_field(dotted)
    if dotted == ALGORITHM_FIELD and algorithms:
        raise ConfigError("the algorithm axis already names the algorithms", field="--algorithms")
    algorithms = list(algorithms or [base.algorithm.name])
    out_dir = Path(out_dir or base.output.directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    if gates:
        run_gates(out_dir, override_gates)

    label = axis.replace(".", "_")
    if dotted == ALGORITHM_FIELD:
        tasks = [(base, dotted, value, value, out_dir / f"{label}={value}") for value in values]
    else:
        tasks = [(base, dotted, value, algorithm, out_dir / f"{label}={value}" / algorithm)
                 for value in values for algorithm in algorithms]
    logger.info("Sweep over %s: %d values, %d runs", dotted, len(values), len(tasks))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_task, tasks))
    else:
        outcomes = [_sweep_task(task) for task in tasks]

    path = out_dir / SWEEP_CSV
    fieldnames = ["axis", "value", "algorithm", "fold", "final_accuracy", "best_accuracy", "status", "error"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for value, algorithm, rows in outcomes:
            for row in rows:
                writer.writerow({
                    "axis": dotted,
                    "value": value,
                    "algorithm": algorithm,
                    "fold": row["fold"],
                    "final_accuracy": "" if row["final_accuracy"] is None else repr(row["final_accuracy"]),
                    "best_accuracy": "" if row["best_accuracy"] is None else repr(row["best_accuracy"]),
                    "status": row["status"],
                    "error": row["error"],
                })
    logger.info("Sweep written to %s", path)
    return path

