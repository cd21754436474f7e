import argparse
import logging
from pathlib import Path

from app.commands import handles_errors, with_seed
from app.core.exceptions import CheckpointError, ConfigError
from app.models.mixture import get_preset
from app.schemas.config import Objective, RunConfig
from app.services import checkpoint_service
from app.services.training_service import TrainingService

logger = logging.getLogger(__name__)


def _load(args) -> RunConfig:
    return with_seed(checkpoint_service.load_run_config(args.config), args.seed)


def _start(config: RunConfig, out_override) -> Path:
    out = checkpoint_service.output_dir(config, out_override)
    checkpoint_service.write_json(out / "config.json", config)
    logger.info(f"Run '{config.name}' ({config.train.objective.value} on {config.train.dataset}) writing to {out}")
    return out


def _init_generator(service: TrainingService, path: str):
    """FM checkpoint weights (EMA when present) re-validated against the configured generator."""
    checkpoint = checkpoint_service.load_checkpoint(path)
    if checkpoint.objective != Objective.FM:
        raise CheckpointError(f"init checkpoint must come from FM training, got '{checkpoint.objective.value}'")
    arrays = checkpoint.ema if checkpoint.ema is not None else checkpoint.generator
    logger.info(f"Initializing the generator from {path} (step {checkpoint.step})")
    return checkpoint_service.to_parameters(service.generator_spec(), arrays, "generator")


@handles_errors
def cmd_train(args) -> int:
    config = _load(args)
    dataset = get_preset(config.train.dataset)
    out = _start(config, args.out)
    if config.train.objective == Objective.ORACLE:
        checkpoint_service.save_checkpoint(out / "checkpoint.json", checkpoint_service.oracle_checkpoint(config))
        return 0

    service = TrainingService(config, dataset, out)
    init_g = None
    if config.init_checkpoint and config.train.objective != Objective.AFM:
        init_g = _init_generator(service, config.init_checkpoint)
    result = service.run(init_g)
    logger.info(f"Training finished after {result.step} updates: {result.counters}")
    return 0


@handles_errors
def cmd_posttrain(args) -> int:
    config = _load(args)
    objective = Objective(args.objective)
    config = RunConfig.model_validate({
        **config.model_dump(),
        "train": {**config.train.model_dump(), "objective": objective},
    })
    init_path = args.init or config.init_checkpoint
    if not init_path:
        raise ConfigError("init_checkpoint", "post-training needs --init or init_checkpoint")

    dataset = get_preset(config.train.dataset)
    out = _start(config, args.out)
    service = TrainingService(config, dataset, out)
    init_g = _init_generator(service, init_path)
    result = service.run(init_g)
    logger.info(f"Post-training ({objective.value}) finished after {result.step} updates: {result.counters}")
    return 0


def register(subparsers) -> None:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="RunConfig JSON file")
    common.add_argument("--seed", type=int, default=None, help="override train.seed")
    common.add_argument("--out", default=None, help="output directory")

    train = subparsers.add_parser("train", parents=[common], help="train a model from a config")
    train.set_defaults(handler=cmd_train)

    posttrain = subparsers.add_parser(
        "posttrain", parents=[common], help="continue an FM checkpoint with CAFM (or FM as a control)"
    )
    posttrain.add_argument("--init", default=None, help="FM checkpoint to start from")
    posttrain.add_argument("--objective", choices=["cafm", "fm"], default="cafm")
    posttrain.set_defaults(handler=cmd_posttrain)
