from fractions import Fraction

import pytest

from bnlab.config import (
    ALG_BN_SCAFFOLD_1, ALG_BN_SCAFFOLD_2, ALG_CENTRALIZED, ALG_FEDAVG, ALG_FEDBN, ALG_FEDTAN, ALG_SCAFFOLD_1,
    ALG_SCAFFOLD_2,
)
from bnlab.exceptions import ConfigError
from bnlab.services import accounting, nn_core, oracles

W, S = 11_180_000, 9_600


def test_params_per_global_step():
    assert accounting.params_per_global_step(ALG_FEDAVG, W, S) == W + S
    assert accounting.params_per_global_step(ALG_SCAFFOLD_2, W, S) == 2 * W + S
    assert accounting.params_per_global_step(ALG_BN_SCAFFOLD_2, W, S) == 2 * W + 2 * S
    assert accounting.params_per_global_step(ALG_FEDTAN, W, S) == 2 * W + 4 * S
    assert accounting.params_per_global_step(ALG_FEDBN, W, S, A=100) == W - 100


def test_bn_scaffold_overhead_is_one_statistics_vector():
    delta = (accounting.params_per_global_step(ALG_BN_SCAFFOLD_2, W, S)
             - accounting.params_per_global_step(ALG_SCAFFOLD_2, W, S))
    assert delta == S


def test_relative_overhead_for_the_large_model():
    rel = accounting.overhead_increase(W, S)
    assert rel == Fraction(S, 2 * W + S)
    # 9.6k statistics on top of SCAFFOLD's 2W + S for an 11.18M-weight model
    assert rel == Fraction(9_600, 22_369_600)
    assert abs(float(rel) - 4.3e-4) < 1e-5
    assert 100 * float(rel) == pytest.approx(0.0429, abs=1e-4)


def test_fedtan_rounds_per_local_step():
    assert accounting.rounds_per_local_step(ALG_FEDTAN, 2, 10, 18) == 22


def test_rounds_per_local_step_plain():
    assert accounting.rounds_per_local_step(ALG_FEDAVG, 5, 10, 3) == Fraction(1)
    assert accounting.rounds_per_local_step(ALG_BN_SCAFFOLD_2, 2, 3, 3) == Fraction(4, 3)
    assert accounting.rounds_per_local_step(ALG_CENTRALIZED, 2, 3, 3) == 0


def test_account_communication_cumulative():
    rounds, params = accounting.account_communication(ALG_FEDAVG, 2, 10, W, S, 3, 100)
    assert rounds == 40
    assert params == 10 * (W + S)
    rounds, params = accounting.account_communication(ALG_FEDAVG, 2, 10, W, S, 3, 15)
    assert rounds == 6
    assert params == W + S


def test_account_communication_rejects_bad_input():
    with pytest.raises(ConfigError):
        accounting.account_communication("FedProx", 2, 10, W, S, 3, 10)
    with pytest.raises(ConfigError):
        accounting.account_communication(ALG_FEDAVG, 0, 10, W, S, 3, 10)


def test_gradients_per_local_step():
    assert accounting.account_gradients(ALG_FEDAVG, 2, 128, 60_000, 10) == 256
    assert accounting.account_gradients(ALG_BN_SCAFFOLD_2, 5, 32, 60_000, 10) == 160
    assert accounting.account_gradients(ALG_SCAFFOLD_1, 2, 128, 60_000, 10) == 256 + 6_000
    assert accounting.account_gradients(ALG_BN_SCAFFOLD_1, 2, 10, 5, 2) == Fraction(45, 2)


def test_model_counts():
    arch = nn_core.mlp((784,), 10, hidden=64)
    counts = accounting.model_counts(arch)
    assert counts["W"] == 784 * 64 + 64 + 2 * 64 + 64 * 64 + 64 + 2 * 64 + 64 * 10 + 10
    assert counts["S"] == 4 * 64
    assert counts["A"] == 4 * 64
    assert counts["depth"] == 3


def test_simulated_ledgers_match_formulas():
    report = oracles.check_accounting(clients_grid=(2, 5), steps_grid=(1, 10))
    assert report.passed, report.witness
