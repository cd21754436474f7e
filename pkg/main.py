import argparse
import logging
import sys

from app.core.config import settings
from app.commands import evaluate, sample, selftest, train

# Configure logging
logging.basicConfig(level=settings.LOG_LEVEL)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adversarial-flow-toolkit",
        description="Flow matching and adversarial flow training on analytic Gaussian mixtures",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Register commands
    train.register(subparsers)
    sample.register(subparsers)
    evaluate.register(subparsers)
    selftest.register(subparsers)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
