"""
Client/server state and per-round reports.
"""
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional

from bnlab.models.dataset import BatchSchedule, Dataset
from bnlab.models.tensors import TensorDict


@dataclass(frozen=True)
class ControlVariates:
    c: TensorDict  # gradient-shaped
    k: TensorDict  # statistics-shaped

    @classmethod
    def zeros(cls, params: TensorDict, stats: TensorDict) -> "ControlVariates":
        return cls(params.zeros_like(), stats.zeros_like())


@dataclass(frozen=True)
class ClientState:
    client_id: int
    weights: TensorDict
    running_stats: TensorDict
    cv: ControlVariates
    dataset: Dataset
    schedule: BatchSchedule
    train_loss: Optional[float] = None  # mean loss over the last round's local steps

    @property
    def rng_seed(self) -> int:
        return self.schedule.seed


@dataclass(frozen=True)
class CommLedger:
    """Measured cumulative cost; compare against accounting.account_* for the closed forms."""
    comm_rounds: Fraction = Fraction(0)
    comm_params: int = 0       # up-link parameters of one client, summed over global steps
    gradients: int = 0         # per-sample gradients evaluated by all clients

    def add(self, rounds: int, params: int, gradients: int) -> "CommLedger":
        return CommLedger(self.comm_rounds + rounds, self.comm_params + params, self.gradients + gradients)


@dataclass(frozen=True)
class ServerState:
    global_w: TensorDict
    global_s: TensorDict
    global_cv: ControlVariates
    round: int = 0
    ledger: CommLedger = field(default_factory=CommLedger)


@dataclass(frozen=True)
class RoundReport:
    round: int          # 1-based global step
    iteration: int      # cumulative local iterations after this round
    lr: float
    client_losses: List[float]
    eval_accuracy: Optional[float]
    eval_loss: Optional[float]
    comm_rounds: Fraction
    comm_params: int
    gradients: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "round": self.round,
            "iteration": self.iteration,
            "lr": self.lr,
            "clientLosses": list(self.client_losses),
            "evalAccuracy": self.eval_accuracy,
            "evalLoss": self.eval_loss,
            "commRounds": str(self.comm_rounds),
            "commParams": self.comm_params,
            "gradients": self.gradients,
        }
