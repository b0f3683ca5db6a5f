"""
Label-skew reproduction driver
==============================
Runs FedAvg, SCAFFOLD-II, BN-SCAFFOLD-II and the centralized baseline at
p = 0.5 and p = 1.0 for several seeds and reports the accuracy margins:

- at p = 1, BN-SCAFFOLD-II beats FedAvg and SCAFFOLD-II by >= 3 points and
  stays within 2 points of Centralized;
- at p = 0.5 all four agree within 2 points.

Uses the MNIST preset when the IDX files exist, the synthetic one otherwise.
"""

import argparse
import logging
import sys
from pathlib import Path

from bnlab.config import (
    ALG_BN_SCAFFOLD_2, ALG_CENTRALIZED, ALG_FEDAVG, ALG_SCAFFOLD_2, EXIT_GATE, EXIT_OK,
)
from bnlab.exceptions import GateFailure
from bnlab.extensions import configure_logging
from bnlab.models.experiment import load_config
from bnlab.services.data_partition import resolve_data_path
from bnlab.services.experiment_service import run_experiment, run_gates

logger = logging.getLogger("bnlab.experiments")

# =============================================================================
# CONFIGURATION
# =============================================================================

CONFIG_DIR = Path(__file__).resolve().parent / "configs"
MNIST_PRESET = CONFIG_DIR / "label_skew_mnist.toml"
SYNTHETIC_PRESET = CONFIG_DIR / "label_skew_synthetic.toml"

ALGORITHMS = [ALG_FEDAVG, ALG_SCAFFOLD_2, ALG_BN_SCAFFOLD_2, ALG_CENTRALIZED]
SKEWS = [0.5, 1.0]
SEEDS = [0, 1, 2]

BASELINE_MARGIN = 0.03  # BN-SCAFFOLD-II over FedAvg / SCAFFOLD-II at p = 1
CENTRALIZED_GAP = 0.02
AGREEMENT_GAP = 0.02    # spread of all four at p = 0.5


def pick_preset():
    config = load_config(MNIST_PRESET)
    if all(resolve_data_path(p).exists() for p in (config.data.train_images, config.data.test_images)):
        return config
    logger.info("MNIST files not found under data/, using the synthetic preset")
    return load_config(SYNTHETIC_PRESET)


def run_grid(base, out_root: Path, seeds=SEEDS, skews=SKEWS, iterations=None):
    """{(seed, p): {algorithm: final accuracy}}"""
    results = {}
    for seed in seeds:
        for p in skews:
            config = base.with_value("training.seed", seed).with_value("partition.p", p)
            if iterations is not None:
                config = config.with_value("training.iterations", iterations)
            accuracies = {}
            for algorithm in ALGORITHMS:
                run = config.with_value("algorithm.name", algorithm)
                result = run_experiment(run, out_root / f"seed={seed}" / f"p={p}" / algorithm, gates=False)
                accuracies[algorithm] = result.mean_accuracy
            results[(seed, p)] = accuracies
    return results


def check_margins(results, seeds=SEEDS):
    """Per seed: (strong-skew margins hold, weak-skew agreement holds)."""
    verdicts = {}
    for seed in seeds:
        strong = results[(seed, 1.0)]
        weak = results[(seed, 0.5)]
        bn = strong[ALG_BN_SCAFFOLD_2]
        strong_ok = (bn - strong[ALG_FEDAVG] >= BASELINE_MARGIN
                     and bn - strong[ALG_SCAFFOLD_2] >= BASELINE_MARGIN
                     and abs(bn - strong[ALG_CENTRALIZED]) <= CENTRALIZED_GAP)
        weak_ok = max(weak.values()) - min(weak.values()) <= AGREEMENT_GAP
        verdicts[seed] = (strong_ok, weak_ok)
    return verdicts


def main():
    parser = argparse.ArgumentParser(description="Reproduce the label-skew accuracy pattern at desk scale")
    parser.add_argument("--out", type=str, default="results/reproduce_label_skew", help="Output root")
    parser.add_argument("--seeds", type=int, nargs="+", default=SEEDS, help="Master seeds")
    parser.add_argument("--iterations", type=int, default=None, help="Override the iteration budget")
    parser.add_argument("--override-gates", action="store_true", help="Run even if oracle gates fail")
    args = parser.parse_args()
    configure_logging()

    out_root = Path(args.out)
    try:
        run_gates(out_root, args.override_gates)
    except GateFailure as exc:
        logger.error("%s", exc)
        return EXIT_GATE

    results = run_grid(pick_preset(), out_root, args.seeds, SKEWS, args.iterations)
    verdicts = check_margins(results, args.seeds)

    print("\n" + "=" * 72)
    print(f"{'seed':>4} {'p':>5} " + " ".join(f"{name:>15}" for name in ALGORITHMS))
    print("=" * 72)
    for (seed, p), accuracies in sorted(results.items()):
        print(f"{seed:>4} {p:>5} " + " ".join(f"{accuracies[name]:>15.4f}" for name in ALGORITHMS))
    strong = sum(1 for ok, _ in verdicts.values() if ok)
    weak = sum(1 for _, ok in verdicts.values() if ok)
    print(f"\n[RESULT] p = 1.0 margins hold for {strong}/{len(verdicts)} seeds")
    print(f"[RESULT] p = 0.5 agreement holds for {weak}/{len(verdicts)} seeds")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
