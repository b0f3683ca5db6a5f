"""
Application configuration for the BN federated-learning laboratory.
Supports environment-based settings (.env) and the named experiment constants.
"""
import os
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

# Project paths
BASE_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = BASE_DIR.parent

load_dotenv(PROJECT_ROOT / ".env")

# Output / data locations
OUTPUT_DIR = os.getenv("BNLAB_OUTPUT_DIR", str(PROJECT_ROOT / "results"))
DATA_DIR = os.getenv("BNLAB_DATA_DIR", str(PROJECT_ROOT / "data"))
ORACLE_REPORT_NAME = os.getenv("BNLAB_ORACLE_REPORT", "oracles.jsonl")

# Logging
LOG_LEVEL = os.getenv("BNLAB_LOG_LEVEL", "INFO")

# Numerics
PRECISION_WIDE = "wide"
PRECISION_STANDARD = "standard"
PRECISIONS = {
    PRECISION_WIDE: np.float64,
    PRECISION_STANDARD: np.float32,
}
DEFAULT_PRECISION = os.getenv("BNLAB_PRECISION", PRECISION_STANDARD)
MASTER_SEED = int(os.getenv("BNLAB_MASTER_SEED", "0"))

# Batch normalization
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9  # rho in  s_hat <- rho * s_hat + (1 - rho) * s
VAR_THRESHOLD_MNIST = 1e-2
VAR_THRESHOLD_CIFAR = 1.0

# Chunk size for full-dataset passes (option I control variates, evaluation)
FULL_PASS_CHUNK = int(os.getenv("BNLAB_FULL_PASS_CHUNK", "256"))

# Algorithms
ALG_CENTRALIZED = "Centralized"
ALG_FEDAVG = "FedAvg"
ALG_SCAFFOLD_1 = "SCAFFOLD-I"
ALG_SCAFFOLD_2 = "SCAFFOLD-II"
ALG_BN_SCAFFOLD_1 = "BN-SCAFFOLD-I"
ALG_BN_SCAFFOLD_2 = "BN-SCAFFOLD-II"
ALG_FEDTAN = "FedTAN"
ALG_FEDBN = "FedBN"
ALG_SILOBN = "SiloBN"
ALG_FIXBN = "FixBN"
ALG_FIXBN_SCAFFOLD = "FixBN+SCAFFOLD"
ALG_FEDBN_SCAFFOLD = "FedBN+SCAFFOLD"
ALG_SILOBN_SCAFFOLD = "SiloBN+SCAFFOLD"
FEDERATED_ALGORITHMS = [
    ALG_FEDAVG, ALG_SCAFFOLD_1, ALG_SCAFFOLD_2, ALG_BN_SCAFFOLD_1, ALG_BN_SCAFFOLD_2,
    ALG_FEDTAN, ALG_FEDBN, ALG_SILOBN, ALG_FIXBN,
    ALG_FIXBN_SCAFFOLD, ALG_FEDBN_SCAFFOLD, ALG_SILOBN_SCAFFOLD,
]
ALGORITHMS = FEDERATED_ALGORITHMS + [ALG_CENTRALIZED]

# Architectures
ARCH_MLP = "mlp"
ARCH_CNN = "cnn"
ARCH_LINEAR = "linear"
ARCHITECTURES = [ARCH_MLP, ARCH_CNN, ARCH_LINEAR]

# Normalization presets (mean, std) applied after scaling; CIFAR values are on the 0-255 scale
NORMALIZATION_PRESETS = {
    "mnist": ((0.1307,), (0.3081,)),
    "cifar": ((125.3 / 255.0, 123.0 / 255.0, 113.9 / 255.0), (63.0 / 255.0, 62.1 / 255.0, 66.7 / 255.0)),
    "none": ((0.0,), (1.0,)),
}

# IDX magic numbers
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Oracle tolerances
TOL_GRADIENT = 1e-5
TOL_RECURSION = 1e-10
TOL_AGGREGATION = 1e-12
FD_STEP = 1e-5

# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_GATE = 2
EXIT_DIVERGED = 3

# Output files
ROUNDS_CSV = "rounds.csv"
SUMMARY_CSV = "summary.csv"
SWEEP_CSV = "sweep.csv"
METADATA_JSON = "metadata.json"
