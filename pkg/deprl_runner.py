"""
deprl_runner.py
Command-line entry point.

    python deprl_runner.py run --spec experiments/minimal.spec --out results/
    python deprl_runner.py sweep-speedup --spec experiments/speedup_iid.spec --counts 4,8,16 --epsilon 0.05
    python deprl_runner.py gradcheck --instances 200
    python deprl_runner.py generalize --spec experiments/personalization.spec

Exit codes: 0 ok, 1 gradcheck tolerance exceeded, 2 invalid spec or argument,
3 run aborted on non-finite parameters, 4 file I/O failure.
"""

import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from errors import ConstructionError, InvalidArgumentError, RunAbortedError, ShardFileError, SpecError
from handlers.generalize import generalize_cmd
from handlers.gradcheck import DEFAULT_INSTANCES, DEFAULT_TOLERANCE, gradcheck_cmd
from handlers.run import run_cmd
from handlers.sweep import sweep_cmd
from utils.io_utils import print_status

# ✅ Env
load_dotenv()
LOG_LEVEL = os.getenv("DEPRL_LOG_LEVEL", "INFO").upper()

# ✅ Logging
logging.basicConfig(
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    level=getattr(logging, LOG_LEVEL, logging.INFO),
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORTED = 3
EXIT_IO = 4


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="deprl", description="Personalized decentralized learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_spec(p):
        p.add_argument("--spec", required=True, help="experiment spec file")
        p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        p.add_argument("--threads", type=_positive_int, default=1, help="worker threads inside a round")

    p_run = sub.add_parser("run", help="run every seed of a spec")
    with_spec(p_run)
    p_run.add_argument("--checkpoint-every", type=_positive_int, default=None)
    p_run.add_argument("--seed-workers", type=_positive_int, default=1, help="seeds run concurrently")
    p_run.add_argument("--resume", default=None, help="continue one seed from a checkpoint file")
    p_run.set_defaults(handler=run_cmd)

    p_sweep = sub.add_parser("sweep-speedup", help="rounds to reach epsilon as N grows")
    with_spec(p_sweep)
    p_sweep.add_argument("--counts", default=None, help="comma separated worker counts (overrides sweep.worker_counts)")
    p_sweep.add_argument("--epsilon", type=float, default=None)
    p_sweep.set_defaults(handler=sweep_cmd)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--instances", type=int, default=DEFAULT_INSTANCES)
    p_grad.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p_grad.set_defaults(handler=gradcheck_cmd)

    p_gen = sub.add_parser("generalize", help="frozen representation on workers that did not train")
    with_spec(p_gen)
    p_gen.set_defaults(handler=generalize_cmd)
    return parser


def error_handler(err) -> int:
    """Map a raised error to its exit code, with a one-line diagnostic."""
    if isinstance(err, (SpecError, InvalidArgumentError, ConstructionError)):
        logger.debug("invalid input", exc_info=err)
        print_status(f"invalid input: {err}", ok=False)
        return EXIT_INVALID
    if isinstance(err, RunAbortedError):
        logger.error("run aborted", exc_info=err)
        print_status(str(err), ok=False)
        return EXIT_ABORTED
    if isinstance(err, ShardFileError):
        logger.error("file error", exc_info=err)
        print_status(str(err), ok=False)
        return EXIT_IO
    raise err


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    try:
        return args.handler(args)
    except Exception as e:
        return error_handler(e)


if __name__ == "__main__":
    sys.exit(main())
