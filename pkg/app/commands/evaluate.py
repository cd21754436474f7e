import logging
from pathlib import Path

from app.commands import dataset_for, generator_params, handles_errors, is_conditional, streams_for, velocity_field
from app.core.exceptions import DomainError
from app.schemas.config import Objective
from app.schemas.report import EvalReport
from app.services import checkpoint_service, evaluation_service, oracle_service, sampler_service

logger = logging.getLogger(__name__)


def _parse_scales(text: str):
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise DomainError(f"--cfg-sweep expects comma-separated numbers, got '{text}'")


@handles_errors
def cmd_eval(args) -> int:
    checkpoint = checkpoint_service.load_checkpoint(args.checkpoint)
    gm = dataset_for(checkpoint, args.preset)
    config = checkpoint.config
    rng = streams_for(checkpoint, args.seed).eval
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    discrete = checkpoint.objective == Objective.AFM

    x1 = sampler_service.prior_sample(rng, config.eval_samples, gm.dim)
    if discrete:
        step_fn = sampler_service.afm_step_fn(generator_params(checkpoint))
        samples = sampler_service.afm_difference_sampler(step_fn, x1, sampler_service.uniform_tau(config.sampler.steps))
        field_report = None
    else:
        field = velocity_field(checkpoint, gm)
        samples = sampler_service.sample(field, x1, config.sampler, rng)
        field_report = evaluation_service.field_rel_mse(field, gm, config.eval_t_draws, config.eval_x_per_t, rng)
    target = oracle_service.sample(gm, rng, config.eval_samples)
    report = EvalReport(
        checkpoint=str(args.checkpoint),
        preset=gm.name,
        field=field_report,
        samples=evaluation_service.sample_distance(samples, target, rng),
    )

    if checkpoint.discriminator is not None and checkpoint.objective == Objective.CAFM:
        d = checkpoint_service.to_parameters(checkpoint.discriminator_spec, checkpoint.discriminator, "discriminator")
        report.equilibrium = evaluation_service.equilibrium_report(
            d, velocity_field(checkpoint, gm), gm, config.eval_x_per_t, rng, config.train.t_dot
        )

    if args.cfg_sweep:
        if discrete or not is_conditional(checkpoint, gm):
            raise DomainError("--cfg-sweep needs a class-conditional continuous-time model")
        report.cfg_sweep = evaluation_service.cfg_sweep(
            velocity_field(checkpoint, gm), gm, _parse_scales(args.cfg_sweep), config.sampler,
            max(config.eval_samples // gm.num_components, 2), rng,
        )

    checkpoint_service.write_json(out / "eval.json", report)
    print(report.model_dump_json(indent=2))

    if args.grid:
        if discrete:
            raise DomainError("--grid needs a continuous-time model")
        frame = evaluation_service.field_grid_dump(velocity_field(checkpoint, gm), gm, config.grid)
        checkpoint_service.save_frame(out / "field_grid.csv", frame)
        logger.info(f"Wrote {len(frame)} grid rows to {out / 'field_grid.csv'}")
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="score a checkpoint against the analytic oracle")
    parser.add_argument("checkpoint")
    parser.add_argument("--preset", default=None, help="dataset preset (defaults to the training dataset)")
    parser.add_argument("--grid", action="store_true", help="also write a field dump on the config grid")
    parser.add_argument("--cfg-sweep", default=None, help="comma-separated guidance scales")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.set_defaults(handler=cmd_eval)
