import logging

import pytest

from bnlab.app import main
from bnlab.config import EXIT_CONFIG, EXIT_DIVERGED, EXIT_GATE, EXIT_OK, ORACLE_REPORT_NAME, ROUNDS_CSV, SWEEP_CSV
from bnlab.exceptions import DivergenceError
from bnlab.extensions import configure_logging
from bnlab.models.experiment import dump_config
from bnlab.services import data_partition, experiment_service, fl_family, oracles, orchestrator
from bnlab.services.oracles import OracleReport
from tests.test_experiment_service import read_csv, small_config


def passing_suite(quick=False, report_path=None):
    reports = [OracleReport.build("gradients[mlp,seed=0]", 0.0, 1e-6)]
    if report_path is not None:
        oracles.write_reports(reports, report_path)
    return reports


def failing_suite(quick=False, report_path=None):
    reports = [OracleReport.build("homogeneous_collapse", 1.0, 1e-12)]
    if report_path is not None:
        oracles.write_reports(reports, report_path)
    return reports


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(dump_config(small_config()))
    return path


@pytest.fixture
def gates(monkeypatch):
    monkeypatch.setattr(experiment_service, "_gate_cache", {})

    def use(suite):
        monkeypatch.setattr(oracles, "run_oracle_suite", suite)
    return use


def test_run_succeeds(tmp_path, config_path, gates):
    gates(passing_suite)
    out = tmp_path / "out"
    assert main(["run", str(config_path), "--out", str(out)]) == EXIT_OK
    assert len(read_csv(out / ROUNDS_CSV)) == 20
    assert (out / ORACLE_REPORT_NAME).exists()


def test_precision_override(tmp_path, config_path, gates):
    gates(passing_suite)
    out = tmp_path / "out"
    assert main(["run", str(config_path), "--out", str(out), "--precision", "standard"]) == EXIT_OK
    assert '"precision": "standard"' in (out / "metadata.json").read_text()


def test_missing_or_invalid_config(tmp_path, gates):
    gates(passing_suite)
    assert main(["run", str(tmp_path / "absent.toml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text("[partition]\np = 0.3\n")
    assert main(["run", str(bad), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_failed_gates_exit_code(tmp_path, config_path, gates):
    gates(failing_suite)
    out = tmp_path / "out"
    assert main(["run", str(config_path), "--out", str(out)]) == EXIT_GATE
    assert not (out / ROUNDS_CSV).exists()


def test_override_gates_runs_anyway(tmp_path, config_path, gates):
    gates(failing_suite)
    out = tmp_path / "out"
    assert main(["run", str(config_path), "--out", str(out), "--override-gates"]) == EXIT_OK
    assert (out / ROUNDS_CSV).exists()


def test_divergence_exit_code(tmp_path, config_path, gates, monkeypatch):
    gates(passing_suite)

    def diverge(*args, **kwargs):
        raise DivergenceError("loss is nan", step=0, client_id=1, global_step=0)

    monkeypatch.setattr(orchestrator, "run_round", diverge)
    assert main(["run", str(config_path), "--out", str(tmp_path / "out")]) == EXIT_DIVERGED


def test_verify_reports_and_exit_codes(tmp_path, gates):
    gates(passing_suite)
    assert main(["verify", "--quick", "--out", str(tmp_path / "ok")]) == EXIT_OK
    assert (tmp_path / "ok" / ORACLE_REPORT_NAME).exists()
    gates(failing_suite)
    assert main(["verify", "--out", str(tmp_path / "bad")]) == EXIT_GATE
    assert "homogeneous_collapse" in (tmp_path / "bad" / ORACLE_REPORT_NAME).read_text()


def test_sweep_command(tmp_path, config_path, gates):
    gates(passing_suite)
    out = tmp_path / "sweep"
    code = main(["sweep", str(config_path), "--axis", "p", "--values", "0.5,0.75",
                 "--algorithms", "FedAvg,BN-SCAFFOLD-II", "--out", str(out)])
    assert code == EXIT_OK
    rows = read_csv(out / SWEEP_CSV)
    assert len(rows) == 4
    assert {row["status"] for row in rows} == {"ok"}


def test_sweep_argument_errors(tmp_path, config_path, gates):
    gates(passing_suite)
    assert main(["sweep", str(config_path), "--axis", "p", "--values", " , "]) == EXIT_CONFIG
    assert main(["sweep", str(config_path), "--axis", "p", "--values", "0.5", "--jobs", "0"]) == EXIT_CONFIG
    assert main(["sweep", str(config_path), "--axis", "optimizer", "--values", "sgd",
                 "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_unknown_command_exits_through_argparse():
    with pytest.raises(SystemExit):
        main(["train"])


def test_service_loggers_share_the_tagged_handler():
    root = configure_logging("debug")
    configure_logging("info")
    assert len(root.handlers) == 1
    assert root.level == logging.INFO
    for module in (data_partition, experiment_service, fl_family, oracles, orchestrator):
        assert module.logger.name == module.__name__
        assert module.logger.name.startswith(root.name + ".")
    record = data_partition.logger.makeRecord(data_partition.logger.name, logging.INFO, __file__, 1,
                                              "loaded %d samples", (3,), None)
    assert root.handlers[0].format(record) == "[INFO] loaded 3 samples"
