import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Dict, List, Mapping, Optional, Tuple

import numpy as np
import torch
from torch import Tensor
from tqdm import tqdm

from app.core import autodiff
from app.core.config import settings
from app.core.exceptions import ConfigError, NonFiniteError
from app.core.streams import RandomStreams
from app.models.flow_path import LINEAR_PATH
from app.models.mixture import GaussianMixture
from app.models.network import EmaState, Parameters
from app.schemas.config import Objective, RunConfig, TrainConfig
from app.schemas.report import MetricsRow
from app.services import (
    checkpoint_service, evaluation_service, flow_service, network_service,
    objective_service, oracle_service, sampler_service,
)

logger = logging.getLogger(__name__)

SPIKE_WINDOW = 50
SPIKE_FACTOR = 10.0
SPIKE_MIN_HISTORY = 10


class AdamState:
    """Adam moments for one parameter collection, backed by torch.optim.AdamW.

    The optimizer updates the Parameters tensors in place.
    """

    def __init__(self, params: Parameters, lr: float = 1e-4, beta: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.names = params.names()
        self._tensors = [params[name] for name in self.names]
        self.optimizer = torch.optim.AdamW(
            self._tensors, lr=lr, betas=beta, eps=eps, weight_decay=weight_decay, foreach=False
        )

    @property
    def step(self) -> int:
        state = self.optimizer.state.get(self._tensors[0], {})
        return int(state["step"]) if "step" in state else 0

    def moments(self) -> Dict:
        exp_avg, exp_avg_sq = {}, {}
        for name, tensor in zip(self.names, self._tensors):
            state = self.optimizer.state.get(tensor, {})
            exp_avg[name] = state.get("exp_avg", torch.zeros_like(tensor))
            exp_avg_sq[name] = state.get("exp_avg_sq", torch.zeros_like(tensor))
        return {"step": self.step, "exp_avg": exp_avg, "exp_avg_sq": exp_avg_sq}

    def load_moments(self, moments: Mapping) -> None:
        for name, tensor in zip(self.names, self._tensors):
            self.optimizer.state[tensor] = {
                "step": torch.tensor(float(moments["step"]), dtype=torch.float64),
                "exp_avg": moments["exp_avg"][name].clone(),
                "exp_avg_sq": moments["exp_avg_sq"][name].clone(),
            }


def adam_step(
    state: AdamState,
    params: Parameters,
    grads: Mapping[str, Tensor],
    lr: float,
    beta: Tuple[float, float],
    eps: float,
    weight_decay: float,
) -> Tuple[AdamState, Parameters]:
    """Bias-corrected Adam update with decoupled weight decay, in place."""
    for group in state.optimizer.param_groups:
        group["lr"] = lr
        group["betas"] = tuple(beta)
        group["eps"] = eps
        group["weight_decay"] = weight_decay
    for name, tensor in zip(state.names, state._tensors):
        tensor.grad = grads[name].detach()
    with torch.no_grad():
        state.optimizer.step()
    for tensor in state._tensors:
        tensor.grad = None
    return state, params


def grad_norm(grads: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values()))


class SpikeMonitor:
    """Flags gradient norms above SPIKE_FACTOR × the trailing median."""

    def __init__(self, name: str):
        self.name = name
        self.history: Deque[float] = deque(maxlen=SPIKE_WINDOW)
        self.spikes = 0

    def observe(self, value: float, step: int) -> bool:
        spike = False
        if len(self.history) >= SPIKE_MIN_HISTORY:
            median = float(np.median(self.history))
            if median > 0 and value > SPIKE_FACTOR * median:
                spike = True
                self.spikes += 1
                logger.warning(
                    f"{self.name} gradient spike at step {step}: norm {value:.4g} vs trailing median {median:.4g}"
                )
        self.history.append(value)
        return spike


@dataclass
class TrainResult:
    generator: Parameters
    ema: EmaState
    discriminator: Optional[Parameters] = None
    optimizer_g: Optional[AdamState] = None
    optimizer_d: Optional[AdamState] = None
    metrics: List[MetricsRow] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=dict)
    step: int = 0


class TrainingService:
    def __init__(self, config: RunConfig, dataset: GaussianMixture, out_dir: Optional[Path] = None):
        self.config = config
        self.train: TrainConfig = config.train
        self.dataset = dataset
        self.streams = RandomStreams(self.train.seed)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.metrics_writer = (
            checkpoint_service.MetricsWriter(self.out_dir / "metrics.csv") if self.out_dir else None
        )
        self.rows: List[MetricsRow] = []
        self.last: Dict[str, Optional[float]] = {}
        self.d_spikes = SpikeMonitor("discriminator")
        self.g_spikes = SpikeMonitor("generator")

    # Setup

    def generator_spec(self, num_times: int = 1):
        return self.train.generator.to_spec(
            self.dataset.dim, self.dataset.dim, self.dataset.num_classes, num_times
        )

    def discriminator_spec(self):
        return self.train.discriminator.to_spec(
            self.dataset.dim, 1, self.dataset.num_classes, 1, scalar_output=True
        )

    def _init_generator(self, init_g: Optional[Parameters], num_times: int = 1) -> Parameters:
        spec = self.generator_spec(num_times)
        if init_g is None:
            return network_service.init(spec, self.streams.init)
        if init_g.spec != spec:
            raise ConfigError("train.generator", "initial generator does not match the configured network")
        return init_g.clone()

    def _optimizer(self, params: Parameters, lr: float) -> AdamState:
        return AdamState(params, lr, self.train.adam_beta, self.train.adam_eps, self.train.weight_decay)

    def _update(self, state: AdamState, params: Parameters, grads, lr: float) -> None:
        adam_step(state, params, grads, lr, self.train.adam_beta, self.train.adam_eps, self.train.weight_decay)

    def _batch(self):
        return flow_service.sample_batch(
            self.dataset, LINEAR_PATH, self.train.time_sampler, self.streams.data,
            self.train.batch, self.train.cfg_dropout,
        )

    @staticmethod
    def _check_finite(value: Tensor, step: int, phase: str) -> float:
        value = float(value)
        if not math.isfinite(value):
            logger.error(f"Non-finite loss in phase {phase} at step {step}")
            raise NonFiniteError("loss became non-finite", step=step, phase=phase)
        return value

    def _progress(self, desc: str):
        return tqdm(total=self.train.total_steps, desc=desc, disable=not settings.SHOW_PROGRESS)

    # Evaluation and persistence

    def _evaluate(self, ema: EmaState, afm: bool = False) -> Dict[str, Optional[float]]:
        rng = self.streams.eval
        x1 = sampler_service.prior_sample(rng, self.config.eval_samples, self.dataset.dim)
        if afm:
            step_fn = sampler_service.afm_step_fn(ema.shadow)
            samples = sampler_service.afm_difference_sampler(
                step_fn, x1, sampler_service.uniform_tau(self.config.sampler.steps)
            )
            field_mse = None
        else:
            model = sampler_service.model_field(ema.shadow)
            samples = sampler_service.sample(model, x1, self.config.sampler, rng)
            field_mse = evaluation_service.field_rel_mse(
                model, self.dataset, self.config.eval_t_draws, self.config.eval_x_per_t, rng
            ).relative_mse
        target = oracle_service.sample(self.dataset, rng, self.config.eval_samples)
        return {
            "field_rel_mse": field_mse,
            "energy_distance": evaluation_service.energy_distance(samples, target),
        }

    def _record(self, step: int, phase: str, ema: EmaState, afm: bool = False) -> None:
        values = dict(self.last)
        values.update(self._evaluate(ema, afm))
        row = MetricsRow(step=step, phase=phase, **values)
        self.rows.append(row)
        if self.metrics_writer:
            self.metrics_writer.write(row)
        logger.info(
            f"step {step} [{phase}] loss_g={row.loss_g} loss_d_adv={row.loss_d_adv} "
            f"field_rel_mse={row.field_rel_mse} energy_distance={row.energy_distance}"
        )

    def _maybe_record(self, step: int, phase: str, ema: EmaState, afm: bool = False) -> None:
        if step % self.config.eval_every == 0 or step == self.train.total_steps:
            self._record(step, phase, ema, afm)

    def _checkpoint(self, result: TrainResult, objective: Objective, final: bool = False) -> None:
        if self.out_dir is None:
            return
        checkpoint = checkpoint_service.build_checkpoint(
            self.config,
            objective,
            result.step,
            generator=result.generator,
            discriminator=result.discriminator,
            ema=result.ema,
            optimizer_g=result.optimizer_g.moments() if result.optimizer_g else None,
            optimizer_d=result.optimizer_d.moments() if result.optimizer_d else None,
            rng_state=self.streams.state_dict(),
            counters=result.counters,
        )
        name = "checkpoint.json" if final else f"checkpoint_{result.step:08d}.json"
        checkpoint_service.save_checkpoint(self.out_dir / name, checkpoint)

    def _maybe_checkpoint(self, result: TrainResult, objective: Objective) -> None:
        every = self.config.checkpoint_every
        if every and result.step % every == 0 and result.step != self.train.total_steps:
            self._checkpoint(result, objective)

    # Flow matching

    def train_fm(self, init_g: Optional[Parameters] = None) -> TrainResult:
        """Regress G onto conditional velocities; optionally continue from `init_g`."""
        g = self._init_generator(init_g)
        opt_g = self._optimizer(g, self.train.g_lr)
        ema = network_service.ema_init(g, self.train.ema_decay)
        result = TrainResult(generator=g, ema=ema, optimizer_g=opt_g, counters={"g": 0})
        logger.info(f"FM training on {self.dataset.name} for {self.train.total_steps} steps")

        with self._progress("fm") as bar:
            for step in range(1, self.train.total_steps + 1):
                batch = self._batch()

                def loss_fn(tensors):
                    v_hat = network_service.g_forward(g, batch.x_t, batch.t, batch.c, tensors)
                    return objective_service.fm_loss(v_hat, batch.v_bar)

                grads, loss = autodiff.value_and_grad(loss_fn, g.tensors)
                loss = self._check_finite(loss, step, "fm")
                norm = grad_norm(grads)
                self.g_spikes.observe(norm, step)
                self._update(opt_g, g, grads, self.train.g_lr)
                ema = network_service.ema_update(ema, g)
                result.ema = ema
                result.step = step
                result.counters["g"] += 1
                self.last = {"loss_g": loss, "grad_norm_g": norm}
                self._maybe_record(step, "fm", ema)
                self._maybe_checkpoint(result, Objective.FM)
                bar.update(1)

        result.metrics = self.rows
        self._checkpoint(result, Objective.FM, final=True)
        return result

    # Continuous adversarial training

    def _cafm_d_update(self, g: Parameters, d: Parameters, opt_d: AdamState, step: int, phase: str) -> None:
        batch = self._batch()
        f_d, _ = objective_service.CONTRASTIVE[self.train.contrastive]
        with torch.no_grad():
            g_output = network_service.g_forward(g, batch.x_t, batch.t, batch.c)

        def loss_fn(tensors):
            terms = objective_service.cafm_d_terms(d, batch, g_output, self.train.t_dot, f_d, tensors)
            total = objective_service.total_d_loss(self.train.weights, terms["adv"], terms["cp"])
            aux = {k: terms[k].detach() for k in ("adv", "cp", "real_logit", "fake_logit")}
            return total, aux

        grads, (total, aux) = autodiff.value_and_grad(loss_fn, d.tensors, has_aux=True)
        self._check_finite(total, step, phase)
        norm = grad_norm(grads)
        self.d_spikes.observe(norm, step)
        self._update(opt_d, d, grads, self.train.d_lr)
        self.last.update({
            "loss_d_adv": float(aux["adv"]),
            "loss_d_cp": float(aux["cp"]),
            "d_logit_real_mean": float(aux["real_logit"].mean()),
            "d_logit_fake_mean": float(aux["fake_logit"].mean()),
            "grad_norm_d": norm,
        })

    def _cafm_g_update(self, g: Parameters, d: Parameters, opt_g: AdamState, step: int, lambda_ot: float) -> None:
        batch = self._batch()
        _, f_g = objective_service.CONTRASTIVE[self.train.contrastive]

        def loss_fn(tensors):
            terms = objective_service.cafm_g_terms(g, d, batch, self.train.t_dot, f_g, tensors)
            ot = objective_service.ot_reg_continuous(terms["g_output"], self.dataset.dim)
            total = objective_service.total_g_loss(self.train.weights, terms["adv"], ot, lambda_ot)
            return total, {"adv": terms["adv"].detach(), "ot": ot.detach()}

        grads, (total, aux) = autodiff.value_and_grad(loss_fn, g.tensors, has_aux=True)
        total = self._check_finite(total, step, "cafm")
        norm = grad_norm(grads)
        self.g_spikes.observe(norm, step)
        self._update(opt_g, g, grads, self.train.g_lr)
        self.last.update({
            "loss_g": total,
            "loss_g_adv": float(aux["adv"]),
            "loss_g_ot": float(aux["ot"]),
            "grad_norm_g": norm,
        })

    def _alternate(
        self,
        result: TrainResult,
        d_update: Callable[[int, str], None],
        g_update: Callable[[int, float], None],
        objective: Objective,
        phase: str,
    ) -> TrainResult:
        """Warm-up D-only updates, then cycles of N D-updates and one G-update.

        Every optimizer update counts toward total_steps.
        """
        train = self.train
        counters = result.counters
        afm = objective == Objective.AFM
        step = 0
        n_disc = train.schedules.n_disc_at(0, train.n_disc)
        lambda_ot = train.schedules.lambda_ot_at(0, train.weights.lambda_ot)

        def advance(current_phase: str):
            nonlocal step
            step += 1
            result.step = step
            self._maybe_record(step, current_phase, result.ema, afm)
            self._maybe_checkpoint(result, objective)
            bar.update(1)

        with self._progress(phase) as bar:
            while step < train.total_steps and counters["warmup_d"] < train.d_warmup_steps:
                d_update(step + 1, "warmup")
                counters["warmup_d"] += 1
                advance("warmup")
            if train.d_warmup_steps:
                logger.info(f"Discriminator warm-up finished after {counters['warmup_d']} updates")

            while step < train.total_steps:
                scheduled_n = train.schedules.n_disc_at(step, train.n_disc)
                if scheduled_n != n_disc:
                    logger.info(f"Discriminator steps per generator step: {n_disc} -> {scheduled_n} at step {step}")
                    n_disc = scheduled_n
                for _ in range(n_disc):
                    if step >= train.total_steps:
                        break
                    d_update(step + 1, phase)
                    counters["d"] += 1
                    advance(phase)
                if step >= train.total_steps:
                    break
                scheduled_ot = train.schedules.lambda_ot_at(step, train.weights.lambda_ot)
                if scheduled_ot != lambda_ot:
                    logger.info(f"lambda_ot: {lambda_ot} -> {scheduled_ot} at step {step}")
                    lambda_ot = scheduled_ot
                g_update(step + 1, lambda_ot)
                counters["g"] += 1
                result.ema = network_service.ema_update(result.ema, result.generator)
                advance(phase)

        result.metrics = self.rows
        if self.d_spikes.spikes or self.g_spikes.spikes:
            logger.warning(f"Gradient spikes: discriminator {self.d_spikes.spikes}, generator {self.g_spikes.spikes}")
        self._checkpoint(result, objective, final=True)
        return result

    def train_cafm(self, init_g: Optional[Parameters] = None) -> TrainResult:
        """Post-training when `init_g` is given, from-scratch otherwise."""
        g = self._init_generator(init_g)
        d = network_service.init(self.discriminator_spec(), self.streams.init)
        opt_g = self._optimizer(g, self.train.g_lr)
        opt_d = self._optimizer(d, self.train.d_lr)
        ema = network_service.ema_init(g, self.train.ema_decay)
        result = TrainResult(
            generator=g, ema=ema, discriminator=d, optimizer_g=opt_g, optimizer_d=opt_d,
            counters={"warmup_d": 0, "d": 0, "g": 0},
        )
        mode = "post-training" if init_g is not None else "from scratch"
        logger.info(
            f"CAFM {mode} on {self.dataset.name}: {self.train.total_steps} updates, "
            f"N={self.train.n_disc}, lambda_ot={self.train.weights.lambda_ot}, f={self.train.contrastive.value}"
        )
        return self._alternate(
            result,
            lambda step, phase: self._cafm_d_update(g, d, opt_d, step, phase),
            lambda step, lambda_ot: self._cafm_g_update(g, d, opt_g, step, lambda_ot),
            Objective.CAFM,
            "cafm",
        )

    # Discrete-time adversarial baseline

    def _afm_batch(self):
        """Same (x, z) pair at a noisier time s and a cleaner time t, s − t ≥ gap."""
        gap = self.train.afm_min_gap
        rng = self.streams.data
        batch = self.train.batch
        x, labels = oracle_service.sample(self.dataset, rng, batch, return_labels=True)
        z = torch.randn(batch, self.dataset.dim, generator=rng, dtype=torch.float64)
        t = (1.0 - gap) * torch.rand(batch, generator=rng, dtype=torch.float64)
        s = t + gap + (1.0 - gap - t) * torch.rand(batch, generator=rng, dtype=torch.float64)
        c = None
        if self.dataset.conditional:
            drop = torch.rand(batch, generator=rng, dtype=torch.float64) < self.train.cfg_dropout
            c = torch.where(drop, torch.full_like(labels, self.dataset.null_class), labels)
        x_s = flow_service.interpolate(LINEAR_PATH, x, z, s)
        x_t = flow_service.interpolate(LINEAR_PATH, x, z, t)
        return x_s, x_t, s, t, c

    @staticmethod
    def _afm_generate(g: Parameters, x_s: Tensor, s: Tensor, t: Tensor, c, tensors=None) -> Tensor:
        times = torch.stack([s, t], dim=1)
        return x_s + (t - s)[:, None] * network_service.g_forward(g, x_s, times, c, tensors)

    def _afm_d_update(self, g: Parameters, d: Parameters, opt_d: AdamState, step: int, phase: str) -> None:
        x_s, real_xt, s, t, c = self._afm_batch()
        with torch.no_grad():
            fake_xt = self._afm_generate(g, x_s, s, t, c)
        weights = self.train.weights

        def loss_fn(tensors):
            adv = objective_service.afm_adv_d(d, real_xt, fake_xt, t, c, tensors)
            r1 = objective_service.r1_penalty(d, real_xt, t, c, tensors)
            r2 = objective_service.r2_penalty(d, fake_xt, t, c, tensors)
            cp = objective_service.cp_penalty_discrete(d, real_xt, fake_xt, t, c, tensors)
            total = objective_service.total_d_loss(weights, adv, cp, r1, r2)
            real = network_service.d_forward(d, real_xt, t, c, tensors).detach()
            fake = network_service.d_forward(d, fake_xt, t, c, tensors).detach()
            return total, {"adv": adv.detach(), "cp": cp.detach(), "real": real, "fake": fake}

        grads, (total, aux) = autodiff.value_and_grad(loss_fn, d.tensors, has_aux=True)
        self._check_finite(total, step, phase)
        norm = grad_norm(grads)
        self.d_spikes.observe(norm, step)
        self._update(opt_d, d, grads, self.train.d_lr)
        self.last.update({
            "loss_d_adv": float(aux["adv"]),
            "loss_d_cp": float(aux["cp"]),
            "d_logit_real_mean": float(aux["real"].mean()),
            "d_logit_fake_mean": float(aux["fake"].mean()),
            "grad_norm_d": norm,
        })

    def _afm_g_update(self, g: Parameters, d: Parameters, opt_g: AdamState, step: int, lambda_ot: float) -> None:
        x_s, real_xt, s, t, c = self._afm_batch()

        def loss_fn(tensors):
            fake_xt = self._afm_generate(g, x_s, s, t, c, tensors)
            adv = objective_service.afm_adv_g(d, real_xt, fake_xt, t, c)
            ot = objective_service.ot_discrete(fake_xt, x_s, s, t, self.dataset.dim)
            total = objective_service.total_g_loss(self.train.weights, adv, ot, lambda_ot)
            return total, {"adv": adv.detach(), "ot": ot.detach()}

        grads, (total, aux) = autodiff.value_and_grad(loss_fn, g.tensors, has_aux=True)
        total = self._check_finite(total, step, "afm")
        norm = grad_norm(grads)
        self.g_spikes.observe(norm, step)
        self._update(opt_g, g, grads, self.train.g_lr)
        self.last.update({
            "loss_g": total,
            "loss_g_adv": float(aux["adv"]),
            "loss_g_ot": float(aux["ot"]),
            "grad_norm_g": norm,
        })

    def train_afm(self) -> TrainResult:
        g = self._init_generator(None, num_times=2)
        d = network_service.init(self.discriminator_spec(), self.streams.init)
        opt_g = self._optimizer(g, self.train.g_lr)
        opt_d = self._optimizer(d, self.train.d_lr)
        ema = network_service.ema_init(g, self.train.ema_decay)
        result = TrainResult(
            generator=g, ema=ema, discriminator=d, optimizer_g=opt_g, optimizer_d=opt_d,
            counters={"warmup_d": 0, "d": 0, "g": 0},
        )
        logger.info(f"AFM training on {self.dataset.name} for {self.train.total_steps} updates")
        return self._alternate(
            result,
            lambda step, phase: self._afm_d_update(g, d, opt_d, step, phase),
            lambda step, lambda_ot: self._afm_g_update(g, d, opt_g, step, lambda_ot),
            Objective.AFM,
            "afm",
        )

    def run(self, init_g: Optional[Parameters] = None) -> TrainResult:
        objective = self.train.objective
        if objective == Objective.FM:
            return self.train_fm(init_g)
        if objective == Objective.CAFM:
            return self.train_cafm(init_g)
        if objective == Objective.AFM:
            return self.train_afm()
        raise ConfigError("train.objective", f"cannot train objective '{objective.value}'")


def train_fm(config: RunConfig, dataset: GaussianMixture, init_g: Optional[Parameters] = None,
             out_dir: Optional[Path] = None) -> Tuple[Parameters, EmaState, List[MetricsRow]]:
    result = TrainingService(config, dataset, out_dir).train_fm(init_g)
    return result.generator, result.ema, result.metrics


def train_cafm(config: RunConfig, dataset: GaussianMixture, init_g: Optional[Parameters] = None,
               out_dir: Optional[Path] = None) -> Tuple[Parameters, Parameters, EmaState, List[MetricsRow]]:
    result = TrainingService(config, dataset, out_dir).train_cafm(init_g)
    return result.generator, result.discriminator, result.ema, result.metrics


def train_afm(config: RunConfig, dataset: GaussianMixture,
              out_dir: Optional[Path] = None) -> Tuple[Parameters, Parameters, List[MetricsRow]]:
    result = TrainingService(config, dataset, out_dir).train_afm()
    return result.generator, result.discriminator, result.metrics
