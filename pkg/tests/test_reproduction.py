import pytest

from experiments import reproduce_label_skew as driver
from experiments import reproduce_local_steps as steps_driver
from bnlab.models.experiment import load_config


def test_margin_check_on_hand_values():
    results = {
        (0, 1.0): {"FedAvg": 0.80, "SCAFFOLD-II": 0.82, "BN-SCAFFOLD-II": 0.90, "Centralized": 0.91},
        (0, 0.5): {"FedAvg": 0.90, "SCAFFOLD-II": 0.905, "BN-SCAFFOLD-II": 0.91, "Centralized": 0.915},
        (1, 1.0): {"FedAvg": 0.88, "SCAFFOLD-II": 0.82, "BN-SCAFFOLD-II": 0.90, "Centralized": 0.91},
        (1, 0.5): {"FedAvg": 0.85, "SCAFFOLD-II": 0.905, "BN-SCAFFOLD-II": 0.91, "Centralized": 0.915},
    }
    verdicts = driver.check_margins(results, seeds=[0, 1])
    assert verdicts[0] == (True, True)
    assert verdicts[1] == (False, False)


def test_local_steps_check_ignores_one_step():
    results = {
        (0, 1): {"FedAvg": 0.90, "BN-SCAFFOLD-II": 0.70},
        (0, 2): {"FedAvg": 0.80, "BN-SCAFFOLD-II": 0.90},
        (0, 5): {"FedAvg": 0.78, "BN-SCAFFOLD-II": 0.91},
        (0, 10): {"FedAvg": 0.75, "BN-SCAFFOLD-II": 0.92},
        (1, 1): {"FedAvg": 0.80, "BN-SCAFFOLD-II": 0.85},
        (1, 2): {"FedAvg": 0.80, "BN-SCAFFOLD-II": 0.90},
        (1, 5): {"FedAvg": 0.91, "BN-SCAFFOLD-II": 0.91},
        (1, 10): {"FedAvg": 0.75, "BN-SCAFFOLD-II": 0.92},
    }
    assert steps_driver.check_steps(results, seeds=[0, 1]) == {0: True, 1: False}


def test_local_steps_preset_is_strongly_skewed():
    base = load_config(steps_driver.SYNTHETIC_PRESET)
    assert base.partition.p == 1.0
    assert base.iterations == 1500
    assert base.with_value("training.local_steps", 5).rounds == 300


@pytest.mark.slow
def test_label_skew_pattern_holds_for_most_seeds(tmp_path):
    seeds = [0, 1, 2]
    base = load_config(driver.SYNTHETIC_PRESET)
    results = driver.run_grid(base, tmp_path, seeds=seeds)
    verdicts = driver.check_margins(results, seeds)
    assert sum(strong for strong, _ in verdicts.values()) >= 2, results
    assert sum(weak for _, weak in verdicts.values()) >= 2, results


@pytest.mark.slow
def test_bn_scaffold_beats_fedavg_beyond_one_local_step(tmp_path):
    seeds = [0, 1, 2]
    base = load_config(steps_driver.SYNTHETIC_PRESET)
    results = steps_driver.run_steps(base, tmp_path, seeds=seeds)
    assert len(results) == len(seeds) * len(steps_driver.LOCAL_STEPS)
    verdicts = steps_driver.check_steps(results, seeds)
    assert sum(verdicts.values()) >= 2, results
