"""
Algorithm descriptors: every federated method is one engine configured by a
statistics correction, a gradient control-variate rule and a statistics
control-variate rule, plus which BN components stay on the client.
"""
from dataclasses import dataclass
from typing import Any, Dict, Optional

from bnlab.config import (
    ALG_BN_SCAFFOLD_1, ALG_BN_SCAFFOLD_2, ALG_CENTRALIZED, ALG_FEDAVG, ALG_FEDBN,
    ALG_FEDBN_SCAFFOLD, ALG_FEDTAN, ALG_FIXBN, ALG_FIXBN_SCAFFOLD, ALG_SCAFFOLD_1,
    ALG_SCAFFOLD_2, ALG_SILOBN, ALG_SILOBN_SCAFFOLD, BN_EPSILON, BN_MOMENTUM,
    FEDERATED_ALGORITHMS, VAR_THRESHOLD_MNIST,
)
from bnlab.exceptions import ConfigError

# Statistics correction applied to the local batch statistics
CORRECTION_NONE = "none"          # live batch statistics
CORRECTION_LINEAR = "linear"      # s + (k - k_i), variance clipped
CORRECTION_FIRST_STEP = "first_step"  # shared statistics on the first local step
CORRECTION_FREEZE = "freeze"      # running statistics injected after T*


@dataclass(frozen=True)
class AlgorithmTraits:
    correction: str = CORRECTION_NONE
    c_option: Optional[int] = None    # 1: full local gradient, 2: recursion over the local steps
    k_option: Optional[int] = None
    local_bn_params: bool = False     # alpha/beta (and their c entries) never leave the client
    local_running_stats: bool = False

    @property
    def uses_c(self) -> bool:
        return self.c_option is not None

    @property
    def uses_k(self) -> bool:
        return self.k_option is not None


TRAITS: Dict[str, AlgorithmTraits] = {
    ALG_FEDAVG: AlgorithmTraits(),
    ALG_SCAFFOLD_1: AlgorithmTraits(c_option=1),
    ALG_SCAFFOLD_2: AlgorithmTraits(c_option=2),
    ALG_BN_SCAFFOLD_1: AlgorithmTraits(CORRECTION_LINEAR, c_option=1, k_option=1),
    ALG_BN_SCAFFOLD_2: AlgorithmTraits(CORRECTION_LINEAR, c_option=2, k_option=2),
    ALG_FEDTAN: AlgorithmTraits(CORRECTION_FIRST_STEP),
    ALG_FEDBN: AlgorithmTraits(local_bn_params=True, local_running_stats=True),
    ALG_SILOBN: AlgorithmTraits(local_running_stats=True),
    ALG_FIXBN: AlgorithmTraits(CORRECTION_FREEZE),
    ALG_FIXBN_SCAFFOLD: AlgorithmTraits(CORRECTION_FREEZE, c_option=2),
    ALG_FEDBN_SCAFFOLD: AlgorithmTraits(c_option=2, local_bn_params=True, local_running_stats=True),
    ALG_SILOBN_SCAFFOLD: AlgorithmTraits(c_option=2, local_running_stats=True),
}


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    rho: float = BN_MOMENTUM
    var_threshold: float = VAR_THRESHOLD_MNIST
    t_star: Optional[int] = None  # cumulative local iteration at which FixBN freezes
    epsilon: float = BN_EPSILON

    def __post_init__(self):
        if self.name not in TRAITS:
            known = ", ".join(FEDERATED_ALGORITHMS)
            raise ConfigError(f"unknown algorithm '{self.name}' (known: {known})", field="algorithm.name")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}", field="algorithm.rho")
        if self.traits.k_option == 2 and not 0.0 < self.rho < 1.0:
            raise ConfigError(f"{self.name} needs 0 < rho < 1, got {self.rho}", field="algorithm.rho")
        if self.var_threshold < 0:
            raise ConfigError(f"var_threshold must be >= 0, got {self.var_threshold}",
                              field="algorithm.var_threshold")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}", field="training.epsilon")
        freezes = self.traits.correction == CORRECTION_FREEZE
        if freezes and self.t_star is None:
            raise ConfigError(f"{self.name} requires t_star", field="algorithm.t_star")
        if not freezes and self.t_star is not None:
            raise ConfigError(f"t_star only applies to FixBN variants, not {self.name}", field="algorithm.t_star")
        if self.t_star is not None and self.t_star < 0:
            raise ConfigError(f"t_star must be >= 0, got {self.t_star}", field="algorithm.t_star")

    @property
    def traits(self) -> AlgorithmTraits:
        return TRAITS[self.name]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "rho": self.rho,
            "varThreshold": self.var_threshold,
            "tStar": self.t_star,
            "epsilon": self.epsilon,
        }


def is_centralized(name: str) -> bool:
    return name == ALG_CENTRALIZED
