"""
Value types shared across the laboratory: tensors, algorithms, data, state and experiment config.
"""
from .tensors import TensorDict, weighted_sum
from .algorithm import AlgorithmSpec
from .dataset import BatchSchedule, Dataset, PartitionPlan
from .state import ClientState, CommLedger, ControlVariates, RoundReport, ServerState
from .experiment import ExperimentConfig, load_config

__all__ = [
    "TensorDict", "weighted_sum", "AlgorithmSpec", "BatchSchedule", "Dataset", "PartitionPlan",
    "ClientState", "CommLedger", "ControlVariates", "RoundReport", "ServerState",
    "ExperimentConfig", "load_config",
]
