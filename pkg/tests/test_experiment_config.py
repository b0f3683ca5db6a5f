from pathlib import Path

import pytest

from bnlab.config import ALG_BN_SCAFFOLD_2, ALG_FIXBN, VAR_THRESHOLD_CIFAR, VAR_THRESHOLD_MNIST
from bnlab.exceptions import ConfigError
from bnlab.models.experiment import (
    ExperimentConfig, config_from_dict, dump_config, load_config, split_field,
)


def test_defaults_give_150_rounds():
    config = ExperimentConfig()
    assert config.rounds == 150
    assert config.iterations == 1500
    assert config.algorithm_spec().name == "FedAvg"


def test_skew_below_half_names_the_field():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"partition": {"p": 0.3}})
    assert info.value.field == "partition.p"


def test_unknown_keys_and_sections():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"training": {"learning_rate": 0.1}})
    assert info.value.field == "training.learning_rate"
    with pytest.raises(ConfigError):
        config_from_dict({"model": {}})


def test_type_mismatch():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"training": {"local_steps": "ten"}})
    assert info.value.field == "training.local_steps"
    config = config_from_dict({"schedule": {"base_lr": 1}})
    assert config.schedule.base_lr == 1.0


def test_rounds_and_iterations_must_agree():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"training": {"rounds": 10, "iterations": 99, "local_steps": 10}})
    assert info.value.field == "training.rounds"
    config = config_from_dict({"training": {"rounds": 12, "local_steps": 5}})
    assert config.rounds == 12
    assert config.iterations == 60


def test_budget_smaller_than_one_round():
    with pytest.raises(ConfigError):
        config_from_dict({"training": {"iterations": 5, "local_steps": 10}})


def test_with_value_keeps_iteration_budget():
    config = ExperimentConfig()
    assert config.with_value("E", "5").rounds == 300
    fixed = config.with_value("training.rounds", "10")
    assert fixed.rounds == 10
    assert fixed.iterations == 100
    assert config.with_value("p", "0.75").partition.p == 0.75
    assert config.with_value("algorithm", ALG_BN_SCAFFOLD_2).algorithm.name == ALG_BN_SCAFFOLD_2


def test_with_value_validates():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig().with_value("p", "0.3")
    assert info.value.field == "partition.p"
    with pytest.raises(ConfigError):
        ExperimentConfig().with_value("training.nonsense", "1")
    with pytest.raises(ConfigError):
        ExperimentConfig().with_value("N", "many")


def test_split_field():
    assert split_field("algorithm.rho") == ("algorithm", "rho")
    with pytest.raises(ConfigError):
        split_field("rho")


def test_fixbn_switch_defaults_to_half_the_budget():
    config = config_from_dict({"algorithm": {"name": ALG_FIXBN}, "training": {"iterations": 200}})
    assert config.algorithm_spec().t_star == 100
    explicit = config.with_value("algorithm.t_star", "30")
    assert explicit.algorithm_spec().t_star == 30


def test_idx_source_needs_paths():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"data": {"source": "idx"}})
    assert info.value.field == "data.train_images"
    with pytest.raises(ConfigError) as info:
        config_from_dict({"data": {"source": "idx", "train_images": "a", "train_labels": "b"}})
    assert info.value.field == "data.test_images"
    folded = config_from_dict({"data": {"source": "idx", "train_images": "a", "train_labels": "b"},
                               "training": {"folds": 5}})
    assert folded.training.folds == 5


def test_unknown_precision_and_algorithm():
    with pytest.raises(ConfigError):
        config_from_dict({"training": {"precision": "half"}})
    with pytest.raises(ConfigError) as info:
        config_from_dict({"algorithm": {"name": "FedProx"}})
    assert info.value.field == "algorithm.name"


def test_load_config_reports_parse_line(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[training]\nlocal_steps = 5\nbatch_size = = 3\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line is not None


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_dump_and_reload(tmp_path):
    config = config_from_dict({"algorithm": {"name": ALG_BN_SCAFFOLD_2, "rho": 0.5},
                               "partition": {"clients": 3, "p": 0.9},
                               "schedule": {"kind": "multistep", "milestones": [10, 20]}})
    path = tmp_path / "round_trip.toml"
    path.write_text(dump_config(config))
    assert load_config(path) == config


PRESETS = Path(__file__).resolve().parent.parent / "experiments" / "configs"


def test_preset_files_load():
    for name in ("smoke", "label_skew_synthetic", "label_skew_mnist", "local_steps_sweep", "cnn_warmup"):
        load_config(PRESETS / f"{name}.toml")


def test_variance_floor_follows_normalization():
    assert ExperimentConfig().algorithm_spec(ALG_BN_SCAFFOLD_2).var_threshold == VAR_THRESHOLD_MNIST
    cifar = config_from_dict({"data": {"normalization": "cifar"}})
    assert cifar.algorithm_spec(ALG_BN_SCAFFOLD_2).var_threshold == VAR_THRESHOLD_CIFAR
    pinned = config_from_dict({"algorithm": {"var_threshold": 0.5}, "data": {"normalization": "cifar"}})
    assert pinned.algorithm_spec(ALG_BN_SCAFFOLD_2).var_threshold == 0.5
    assert ExperimentConfig().with_value("algorithm.var_threshold", "0.25").var_threshold == 0.25
    with pytest.raises(ConfigError) as info:
        config_from_dict({"algorithm": {"var_threshold": "low"}})
    assert info.value.field == "algorithm.var_threshold"


def test_group_shift_is_a_data_field():
    config = config_from_dict({"data": {"group_shift": 2}})
    assert config.data.group_shift == 2.0
    assert config.with_value("data.group_shift", "1.5").data.group_shift == 1.5
