"""
Command-line surface. Each module registers its subcommands on the shared
argparse subparsers; handlers take the parsed namespace and return an exit
status.
"""
import functools
import logging
from typing import Callable, Optional

from pydantic import ValidationError

from app.core.exceptions import CheckpointError, ToolkitError
from app.core.streams import RandomStreams
from app.models.mixture import GaussianMixture, get_preset
from app.models.network import Parameters
from app.schemas.checkpoint import Checkpoint
from app.schemas.config import Objective, RunConfig
from app.services import checkpoint_service, oracle_service, sampler_service

logger = logging.getLogger(__name__)

Handler = Callable[..., int]


def handles_errors(handler: Handler) -> Handler:
    """Turn toolkit and validation errors into a logged diagnostic and exit status 1."""

    @functools.wraps(handler)
    def wrapper(args) -> int:
        try:
            return handler(args)
        except ValidationError as e:
            for error in e.errors():
                field = ".".join(str(part) for part in error["loc"])
                logger.error(f"Invalid config: {field}: {error['msg']}")
            return 1
        except ToolkitError as e:
            logger.error(f"{handler.__name__.replace('cmd_', '')} failed: {e}")
            return 1

    return wrapper


def with_seed(config: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is None:
        return config
    train = config.train.model_copy(update={"seed": seed})
    return RunConfig.model_validate({**config.model_dump(), "train": train.model_dump()})


def streams_for(checkpoint: Checkpoint, seed: Optional[int]) -> RandomStreams:
    return RandomStreams(checkpoint.config.train.seed if seed is None else seed)


def dataset_for(checkpoint: Checkpoint, preset: Optional[str] = None) -> GaussianMixture:
    """The evaluation mixture; its dimension must match the checkpoint's networks."""
    gm = get_preset(preset or checkpoint.config.train.dataset)
    spec = checkpoint.generator_spec
    if spec is not None and spec.in_dim != gm.dim:
        raise CheckpointError(f"preset {gm.name} has dimension {gm.dim} but the checkpoint expects {spec.in_dim}")
    return gm


def is_conditional(checkpoint: Checkpoint, gm: GaussianMixture) -> bool:
    if checkpoint.objective == Objective.ORACLE:
        return gm.conditional
    return bool(checkpoint.generator_spec and checkpoint.generator_spec.num_classes)


def velocity_field(checkpoint: Checkpoint, gm: GaussianMixture) -> sampler_service.VelocityField:
    """Sampler field of a continuous-time checkpoint (EMA generator or the oracle)."""
    if checkpoint.objective == Objective.ORACLE:
        return oracle_service.oracle_field(gm)
    return sampler_service.model_field(checkpoint_service.evaluation_generator(checkpoint))


def generator_params(checkpoint: Checkpoint) -> Parameters:
    return checkpoint_service.evaluation_generator(checkpoint)
