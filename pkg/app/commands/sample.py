import logging
from pathlib import Path

import torch

from app.commands import dataset_for, generator_params, handles_errors, is_conditional, streams_for, velocity_field
from app.core.exceptions import DomainError
from app.schemas.config import Objective, SamplerKind
from app.services import checkpoint_service, sampler_service

logger = logging.getLogger(__name__)


@handles_errors
def cmd_sample(args) -> int:
    checkpoint = checkpoint_service.load_checkpoint(args.checkpoint)
    gm = dataset_for(checkpoint)
    conditional = is_conditional(checkpoint, gm)
    if args.cfg is not None and not conditional:
        raise DomainError("--cfg needs a class-conditional model")
    if args.count < 0:
        raise DomainError(f"--count must be non-negative, got {args.count}")

    update = {}
    if args.sampler:
        update["kind"] = SamplerKind(args.sampler)
    if args.steps:
        update["steps"] = args.steps
    sampler_config = checkpoint.config.sampler.model_copy(update=update)
    rng = streams_for(checkpoint, args.seed).sampler

    x1 = sampler_service.prior_sample(rng, args.count, gm.dim)
    labels = torch.randint(gm.num_components, (args.count,), generator=rng) if conditional else None
    if args.count == 0:
        samples = x1
    elif checkpoint.objective == Objective.AFM:
        if args.cfg is not None:
            raise DomainError("--cfg is not supported for discrete-time checkpoints")
        step_fn = sampler_service.afm_step_fn(generator_params(checkpoint))
        samples = sampler_service.afm_difference_sampler(step_fn, x1, sampler_service.uniform_tau(sampler_config.steps))
        labels = None
    else:
        field = velocity_field(checkpoint, gm)
        if args.cfg is not None:
            field = sampler_service.cfg_wrap(field, field, args.cfg, sampler_config.cfg_interval)
        samples = sampler_service.sample(field, x1, sampler_config, rng, labels)

    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "samples.csv"
    checkpoint_service.save_samples(out, samples, labels)
    logger.info(f"Wrote {args.count} samples ({sampler_config.kind.value}, {sampler_config.steps} steps) to {out}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("sample", help="draw samples from a checkpoint")
    parser.add_argument("checkpoint")
    parser.add_argument("--count", type=int, default=1000)
    parser.add_argument("--cfg", type=float, default=None, help="classifier-free guidance scale")
    parser.add_argument("--sampler", choices=[kind.value for kind in SamplerKind], default=None)
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="samples CSV path")
    parser.set_defaults(handler=cmd_sample)
