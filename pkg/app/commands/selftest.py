import argparse
import logging

from app.commands import handles_errors
from app.services import selftest_service

logger = logging.getLogger(__name__)


@handles_errors
def cmd_selftest(args) -> int:
    results = selftest_service.run(seed=args.seed, names=args.suite, inject_fault=args.inject_fault)
    for result in results:
        status = "PASS" if result["success"] else "FAIL"
        print(f"{status}  {result['suite']}")
    failed = [result["suite"] for result in results if not result["success"]]
    if failed:
        logger.error(f"{len(failed)} of {len(results)} suites failed: {', '.join(failed)}")
        return 1
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("selftest", help="run the numerical property suites")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--suite", action="append", choices=list(selftest_service.SUITES), default=None)
    parser.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    parser.set_defaults(handler=cmd_selftest)
