import csv
import json
import logging

import pytest

from bnlab.config import (
    ALG_CENTRALIZED, ALG_FEDAVG, ALG_SCAFFOLD_2, METADATA_JSON, ROUNDS_CSV, SUMMARY_CSV, SWEEP_CSV,
)
from bnlab.exceptions import ConfigError, DivergenceError, GateFailure
from bnlab.models.experiment import config_from_dict
from bnlab.services import experiment_service, oracles, orchestrator
from bnlab.services.oracles import OracleReport


def small_config(**overrides):
    raw = {
        "algorithm": {"name": ALG_FEDAVG},
        "data": {"classes": 3, "samples_per_class": 20, "test_samples_per_class": 10, "dims": 6, "spread": 0.2},
        "partition": {"clients": 2, "p": 0.5},
        "training": {"hidden": 8, "local_steps": 2, "iterations": 40, "batch_size": 4, "precision": "wide"},
        "schedule": {"base_lr": 0.2},
    }
    for dotted, value in overrides.items():
        section, key = dotted.split("__")
        raw[section][key] = value
    return config_from_dict(raw)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_rounds_summary_and_metadata(tmp_path):
    result = experiment_service.run_experiment(small_config(), tmp_path, gates=False)
    rounds = read_csv(tmp_path / ROUNDS_CSV)
    assert len(rounds) == 20
    assert rounds[-1]["iteration"] == "40"
    assert {"loss_client_0", "loss_client_1", "comm_rounds", "gradients"} <= set(rounds[0])
    assert all(row["status"] == "ok" for row in rounds)

    summary = read_csv(tmp_path / SUMMARY_CSV)
    assert [row["fold"] for row in summary] == ["0", "mean"]
    assert summary[-1]["ci_low"] == "" and summary[-1]["ci_high"] == ""
    assert result.mean_accuracy > 0.5

    metadata = json.loads((tmp_path / METADATA_JSON).read_text())
    assert metadata["rounds"] == 20
    assert metadata["oracle_gates"] is None
    assert metadata["seeds"]["master"] == small_config().training.seed


def test_runs_are_reproducible(tmp_path):
    experiment_service.run_experiment(small_config(), tmp_path / "a", gates=False)
    experiment_service.run_experiment(small_config(), tmp_path / "b", gates=False)
    for name in (ROUNDS_CSV, SUMMARY_CSV):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cross_validation_fills_the_interval(tmp_path):
    result = experiment_service.run_experiment(small_config(training__folds=3), tmp_path, gates=False)
    assert [f.fold for f in result.folds] == [0, 1, 2]
    mean = read_csv(tmp_path / SUMMARY_CSV)[-1]
    low, high = float(mean["ci_low"]), float(mean["ci_high"])
    assert low <= float(mean["final_accuracy"]) <= high


def test_t_interval():
    assert experiment_service.t_interval([0.7]) is None
    low, high = experiment_service.t_interval([0.5, 0.7])
    assert low < 0.6 < high
    assert high - 0.6 == pytest.approx(0.6 - low)


def test_centralized_run_has_no_communication(tmp_path):
    experiment_service.run_experiment(small_config(algorithm__name=ALG_CENTRALIZED), tmp_path, gates=False)
    rounds = read_csv(tmp_path / ROUNDS_CSV)
    assert len(rounds) == 20
    assert {row["comm_rounds"] for row in rounds} == {"0"}
    assert {row["comm_params"] for row in rounds} == {"0"}


def test_divergence_writes_a_marker_row(tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise DivergenceError("loss is nan", step=1, client_id=0, global_step=0)

    monkeypatch.setattr(orchestrator, "run_round", diverge)
    with pytest.raises(DivergenceError):
        experiment_service.run_experiment(small_config(), tmp_path, gates=False)
    rounds = read_csv(tmp_path / ROUNDS_CSV)
    assert rounds[-1]["status"] == "diverged"
    assert rounds[-1]["round"] == "1"
    summary = read_csv(tmp_path / SUMMARY_CSV)
    assert summary[0]["status"] == "diverged"


def failing_suite(quick=False, report_path=None):
    return [OracleReport.build("gradients[mlp,seed=0]", 1.0, 1e-6)]


def test_failed_gates_stop_the_run(tmp_path, monkeypatch):
    monkeypatch.setattr(experiment_service, "_gate_cache", {})
    monkeypatch.setattr(oracles, "run_oracle_suite", failing_suite)
    with pytest.raises(GateFailure) as info:
        experiment_service.run_experiment(small_config(), tmp_path)
    assert info.value.failed == ["gradients[mlp,seed=0]"]
    assert not (tmp_path / ROUNDS_CSV).exists()


def test_overridden_gates_are_recorded(tmp_path, monkeypatch):
    monkeypatch.setattr(experiment_service, "_gate_cache", {})
    monkeypatch.setattr(oracles, "run_oracle_suite", failing_suite)
    experiment_service.run_experiment(small_config(), tmp_path, override_gates=True)
    metadata = json.loads((tmp_path / METADATA_JSON).read_text())
    assert metadata["oracle_gates"] == "overridden"


def test_sweep_records_failures_and_drops_duplicates(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        path = experiment_service.run_sweep(small_config(), "p", ["0.5", "0.5", "0.3"],
                                            [ALG_FEDAVG, ALG_CENTRALIZED], tmp_path, gates=False)
    assert "Duplicate sweep value '0.5'" in caplog.text
    assert path == tmp_path / SWEEP_CSV
    rows = read_csv(path)
    assert len(rows) == 4
    assert {row["axis"] for row in rows} == {"partition.p"}
    ok = [row for row in rows if row["value"] == "0.5"]
    failed = [row for row in rows if row["value"] == "0.3"]
    assert {row["status"] for row in ok} == {"ok"}
    assert {row["status"] for row in failed} == {"failed"}
    assert all("partition.p" in row["error"] for row in failed)
    assert (tmp_path / "p=0.5" / ALG_FEDAVG / ROUNDS_CSV).exists()


def test_sweep_rejects_unknown_axis(tmp_path):
    with pytest.raises(ConfigError) as info:
        experiment_service.run_sweep(small_config(), "optimizer", ["sgd"], out_dir=tmp_path, gates=False)
    assert "optimizer" in str(info.value)


def test_sweep_over_local_steps_keeps_the_budget(tmp_path):
    path = experiment_service.run_sweep(small_config(), "E", ["1", "4"], out_dir=tmp_path, gates=False)
    assert len(read_csv(path)) == 2
    assert len(read_csv(tmp_path / "E=1" / ALG_FEDAVG / ROUNDS_CSV)) == 40
    assert len(read_csv(tmp_path / "E=4" / ALG_FEDAVG / ROUNDS_CSV)) == 10


def test_sweep_over_algorithms_runs_each_named_algorithm(tmp_path):
    path = experiment_service.run_sweep(small_config(), "algorithm", [ALG_FEDAVG, ALG_SCAFFOLD_2],
                                        out_dir=tmp_path, gates=False)
    rows = read_csv(path)
    assert [(row["value"], row["algorithm"]) for row in rows] == [(ALG_FEDAVG, ALG_FEDAVG),
                                                                  (ALG_SCAFFOLD_2, ALG_SCAFFOLD_2)]
    assert {row["status"] for row in rows} == {"ok"}
    for name in (ALG_FEDAVG, ALG_SCAFFOLD_2):
        metadata = json.loads((tmp_path / f"algorithm={name}" / METADATA_JSON).read_text())
        assert metadata["algorithm"] == name


def test_sweep_over_algorithms_rejects_an_algorithm_list(tmp_path):
    with pytest.raises(ConfigError) as info:
        experiment_service.run_sweep(small_config(), "algorithm", [ALG_FEDAVG], [ALG_SCAFFOLD_2],
                                     out_dir=tmp_path, gates=False)
    assert info.value.field == "--algorithms"
