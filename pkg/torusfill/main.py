"""
torusfill command line

    python -m torusfill.main run config.json
    python -m torusfill.main bound-check --gram "[[1,0],[0,1]]" --n 3 --H 2.5
    python -m torusfill.main validate

Exit codes: 0 all checks pass, 2 failed check or runtime error, 3 config error.
"""

# Load environment variables FIRST before any other imports
from pathlib import Path
from dotenv import load_dotenv

# .env lives at the repository root (parent of torusfill/)
env_path = Path(__file__).parent.parent / ".env"
load_dotenv(env_path, override=False)

import argparse
import copy
import json
import logging
import os
import sys
from logging.handlers import TimedRotatingFileHandler
from typing import List, Optional

from pythonjsonlogger import jsonlogger

from .cli_runner import EXIT_CONFIG, run, run_bound_check_cli
from .errors import ConfigError, TorusFillError
from .schemas import Experiment, RunConfig, load_run_config

# ============================================================================
# LOGGING CONFIGURATION
# ============================================================================

class ColoredFormatter(logging.Formatter):
    """Console formatter with per-level colors."""

    COLORS = {
        'DEBUG': '\033[36m',     # Cyan
        'INFO': '\033[32m',      # Green
        'WARNING': '\033[33m',   # Yellow
        'ERROR': '\033[31m',     # Red
        'CRITICAL': '\033[35m',  # Magenta
    }
    RESET = '\033[0m'
    BOLD = '\033[1m'

    def format(self, record):
        # colour a copy; the file handlers format the same record
        record = copy.copy(record)
        color = self.COLORS.get(record.levelname, self.RESET)
        record.levelname = f"{color}{self.BOLD}{record.levelname}{self.RESET}"
        record.msg = f"{color}{record.getMessage()}{self.RESET}"
        record.args = None
        return super().format(record)


def setup_logging(level: Optional[str] = None) -> logging.Logger:
    """
    Configure the "torusfill" logger tree.

    Console level comes from ``level`` or TORUSFILL_LOG_LEVEL (default INFO).
    TORUSFILL_LOG_FILE names the daily-rotated JSON log (default
    torusfill.log); an empty value disables both file handlers.
    """
    logger = logging.getLogger("torusfill")
    logger.setLevel(logging.DEBUG)
    logger.handlers = []

    console_level = (level or os.environ.get("TORUSFILL_LOG_LEVEL") or "INFO").upper()
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(console_level)
    console_handler.setFormatter(ColoredFormatter(
        '%(asctime)s | %(levelname)s | [%(name)s] %(message)s',
        datefmt='%H:%M:%S'
    ))
    logger.addHandler(console_handler)

    log_file = os.environ.get("TORUSFILL_LOG_FILE", "torusfill.log")
    if not log_file:
        return logger

    # Rotates daily, keeps 7 days
    file_handler = TimedRotatingFileHandler(
        log_file, when="midnight", interval=1, backupCount=7, encoding='utf-8'
    )
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(jsonlogger.JsonFormatter(
        '%(asctime)s %(name)s %(levelname)s %(message)s %(lineno)d %(funcName)s',
        rename_fields={'levelname': 'level', 'asctime': 'timestamp'}
    ))
    logger.addHandler(file_handler)

    error_handler = logging.FileHandler(f"{Path(log_file).with_suffix('')}.error.log", mode='a', encoding='utf-8')
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(logging.Formatter(
        '%(asctime)s | %(levelname)s | [%(name)s] %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    ))
    logger.addHandler(error_handler)
    return logger


# ============================================================================
# COMMANDS
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="torusfill", description="Fill-in experiments on flat tori")
    parser.add_argument("--output", help="output root (overridden by a config's output_dir)")
    parser.add_argument("--log-level", help="console log level (default TORUSFILL_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("config", help="path to the run config")

    p_bound = sub.add_parser("bound-check", help="compare boundary data against the fill-in bound")
    p_bound.add_argument("--gram", required=True, help="Gram matrix as JSON, e.g. [[1,0],[0,1]]")
    p_bound.add_argument("--n", type=int, required=True, help="dimension of the fill-in")
    p_bound.add_argument("--H", required=True, help="constant mean curvature or path to a binary field")

    p_validate = sub.add_parser("validate", help="run the curvature-oracle suite")
    p_validate.add_argument("--n", type=int, default=3)
    return parser


def _parse_gram(text: str) -> List[List[float]]:
    try:
        gram = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"--gram is not valid JSON: {e}") from e
    if not isinstance(gram, list) or not all(isinstance(row, list) for row in gram):
        raise ConfigError("--gram must be a JSON list of rows")
    return gram


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger = setup_logging(args.log_level)

    try:
        if args.command == "run":
            return run(load_run_config(args.config), args.output)
        if args.command == "validate":
            return run(RunConfig(experiment=Experiment.VALIDATE, n=args.n), args.output)
        exit_code, verdict = run_bound_check_cli(_parse_gram(args.gram), args.n, args.H, args.output)
        print(json.dumps(verdict.to_dict(), indent=2))
        return exit_code
    except ConfigError as e:
        logger.error(f"[RUN] {e.message} {e.details or ''}")
        return EXIT_CONFIG
    except TorusFillError as e:
        logger.error(f"[RUN] {e.code}: {e.message}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
