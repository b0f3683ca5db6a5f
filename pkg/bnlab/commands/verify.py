"""
verify: run the oracle suite and write the JSONL report.
"""
import logging
from pathlib import Path

from bnlab.config import EXIT_GATE, EXIT_OK, ORACLE_REPORT_NAME, OUTPUT_DIR
from bnlab.services import oracles

logger = logging.getLogger(__name__)


def register(subparsers, parents=()):
    parser = subparsers.add_parser("verify", parents=list(parents), help="Run the oracle gates")
    parser.add_argument("--quick", action="store_true", help="Reduced seed/step grids")
    parser.set_defaults(handler=handle)
    return parser


def handle(args) -> int:
    out_dir = Path(args.out or OUTPUT_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / ORACLE_REPORT_NAME
    reports = oracles.run_oracle_suite(quick=args.quick, report_path=report_path)
    failed = [r.name for r in reports if not r.passed]
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        logger.info("%-40s %s  max error %.3e (tolerance %.1e)", report.name, status, report.max_error,
                    report.tolerance)
    logger.info("Oracle report written to %s", report_path)
    if failed:
        logger.error("%d of %d oracles failed: %s", len(failed), len(reports), ", ".join(failed))
        return EXIT_GATE
    logger.info("All %d oracles passed", len(reports))
    return EXIT_OK
