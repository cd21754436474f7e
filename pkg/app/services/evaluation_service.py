import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.stats import wasserstein_distance
from torch import Tensor

from app.core.exceptions import DomainError, ShapeMismatchError
from app.models.flow_path import LINEAR_PATH
from app.models.mixture import GaussianMixture
from app.models.network import Parameters
from app.schemas.config import GridSpec, SamplerConfig, TimeSampler
from app.schemas.report import (
    CfgSweepEntry, EquilibriumReport, FieldErrorReport, PerTimeError, SampleDistanceReport
)
from app.services import flow_service, network_service, oracle_service, sampler_service

logger = logging.getLogger(__name__)

VelocityField = Callable[..., Tensor]
PAIRWISE_CHUNK = 1024
SLICED_PROJECTIONS = 64
MIN_PATH_NODES = 256


def field_rel_mse(
    field: VelocityField,
    gm: GaussianMixture,
    t_draws: int,
    x_draws_per_t: int,
    rng: torch.Generator,
) -> FieldErrorReport:
    """Relative MSE of `field` against the marginal velocity at x_t ~ p_t.

    Times are stratified over (0, 1); class-conditional mixtures are scored
    through the null class.
    """
    offsets = torch.rand(t_draws, generator=rng, dtype=torch.float64)
    times = (torch.arange(t_draws, dtype=torch.float64) + offsets) / t_draws
    total_err = 0.0
    total_ref = 0.0
    per_t: List[PerTimeError] = []
    for t in times.tolist():
        x = oracle_service.sample(gm, rng, x_draws_per_t)
        z = torch.randn(x_draws_per_t, gm.dim, generator=rng, dtype=torch.float64)
        x_t = flow_service.interpolate(LINEAR_PATH, x, z, t)
        with torch.no_grad():
            predicted = field(x_t, t, None)
        truth = oracle_service.marginal_velocity(gm, x_t, t)
        err = float((predicted - truth).pow(2).sum())
        ref = float(truth.pow(2).sum())
        total_err += err
        total_ref += ref
        per_t.append(PerTimeError(t=t, relative_mse=err / ref if ref > 0 else 0.0))
    return FieldErrorReport(
        n_points=t_draws * x_draws_per_t,
        relative_mse=total_err / total_ref if total_ref > 0 else 0.0,
        per_t=per_t,
    )


def _pairwise_sum(a: Tensor, b: Tensor) -> float:
    total = 0.0
    for start in range(0, a.shape[0], PAIRWISE_CHUNK):
        block = torch.cdist(a[start:start + PAIRWISE_CHUNK], b, compute_mode="donot_use_mm_for_euclid_dist")
        total += float(block.sum())
    return total


def _mean_distinct_pairs(a: Tensor) -> float:
    n = a.shape[0]
    if n < 2:
        return 0.0
    return _pairwise_sum(a, a) / (n * (n - 1))


def energy_distance(samples_a: Tensor, samples_b: Tensor) -> float:
    """2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖ with diagonal-excluded pair means, floored at 0."""
    if samples_a.shape[0] == 0 or samples_b.shape[0] == 0:
        raise DomainError("energy distance needs non-empty sample sets")
    if samples_a.shape[1] != samples_b.shape[1]:
        raise ShapeMismatchError("samples_b", (samples_b.shape[0], samples_a.shape[1]), tuple(samples_b.shape))
    n, m = samples_a.shape[0], samples_b.shape[0]
    cross = _pairwise_sum(samples_a, samples_b)
    if n == m and n > 1:
        # Paired rows are independent draws, so dropping them keeps the estimator unbiased
        cross -= float((samples_a - samples_b).pow(2).sum(dim=1).sqrt().sum())
        cross /= n * (n - 1)
    else:
        cross /= n * m
    value = 2.0 * cross - _mean_distinct_pairs(samples_a) - _mean_distinct_pairs(samples_b)
    return max(value, 0.0)


def sliced_wasserstein(samples_a: Tensor, samples_b: Tensor, rng: torch.Generator,
                       projections: int = SLICED_PROJECTIONS) -> float:
    dim = samples_a.shape[1]
    directions = torch.randn(projections, dim, generator=rng, dtype=torch.float64)
    directions = directions / directions.norm(dim=1, keepdim=True)
    proj_a = (samples_a @ directions.T).numpy()
    proj_b = (samples_b @ directions.T).numpy()
    return float(np.mean([wasserstein_distance(proj_a[:, k], proj_b[:, k]) for k in range(projections)]))


def moment_gaps(samples_a: Tensor, samples_b: Tensor) -> Tuple[float, float]:
    """(‖mean_a − mean_b‖, ‖cov_a − cov_b‖_F)."""
    mean_gap = float((samples_a.mean(dim=0) - samples_b.mean(dim=0)).norm())
    if samples_a.shape[0] < 2 or samples_b.shape[0] < 2:
        return mean_gap, math.nan
    cov_a = torch.atleast_2d(torch.cov(samples_a.T))
    cov_b = torch.atleast_2d(torch.cov(samples_b.T))
    return mean_gap, float((cov_a - cov_b).norm())


def sample_distance(samples_a: Tensor, samples_b: Tensor, rng: torch.Generator) -> SampleDistanceReport:
    mean_gap, cov_gap = moment_gaps(samples_a, samples_b)
    return SampleDistanceReport(
        energy_distance=energy_distance(samples_a, samples_b),
        sliced_wasserstein=sliced_wasserstein(samples_a, samples_b, rng),
        mean_gap=mean_gap,
        cov_gap=cov_gap,
    )


def straight_path(x0: Tensor, x1: Tensor, nodes: int) -> Tuple[Tensor, Tensor, Tensor]:
    """Nodes (ts, xs, vs) of x(t) = x0 + (x1 − x0)·t on a uniform grid over [0, 1]."""
    ts = torch.linspace(0.0, 1.0, nodes, dtype=torch.float64)
    xs = x0[None] + ts[:, None, None] * (x1 - x0)[None]
    vs = (x1 - x0)[None].expand_as(xs)
    return ts, xs, vs


def path_consistency(
    d_params: Parameters,
    ts: Tensor,
    xs: Tensor,
    vs: Tensor,
    c: Optional[Tensor] = None,
) -> float:
    """Worst-row |∫ D_jvp dt − (D(x(1),1) − D(x(0),0))| / (|ΔD| + 1e-9), trapezoid in t."""
    if ts.shape[0] < MIN_PATH_NODES:
        raise DomainError(f"path consistency needs at least {MIN_PATH_NODES} nodes, got {ts.shape[0]}")
    values = []
    tangents = []
    with torch.no_grad():
        for j in range(ts.shape[0]):
            value, tangent = network_service.d_jvp(d_params, xs[j], float(ts[j]), vs[j], 1.0, c)
            values.append(value)
            tangents.append(tangent)
    tangents = torch.stack(tangents)  # (P, B)
    integral = torch.trapezoid(tangents, ts, dim=0)
    delta = values[-1] - values[0]
    return float(((integral - delta).abs() / (delta.abs() + 1e-9)).max())


def equilibrium_report(
    d_params: Parameters,
    g_field: VelocityField,
    gm: GaussianMixture,
    batch: int,
    rng: torch.Generator,
    t_dot: float = 1.0,
) -> EquilibriumReport:
    """Batch means of the real and fake JVP logits and of D at fresh (x_t, t)."""
    sample = flow_service.sample_batch(gm, LINEAR_PATH, TimeSampler(), rng, batch)
    with torch.no_grad():
        g_output = g_field(sample.x_t, sample.t, sample.c)
        d_value, real_logit, fake_logit = network_service.d_jvp_pair(
            d_params, sample.x_t, sample.t, sample.v_bar, g_output, t_dot, sample.c
        )
    return EquilibriumReport(
        real_logit_mean=float(real_logit.mean()),
        fake_logit_mean=float(fake_logit.mean()),
        d_value_mean=float(d_value.mean()),
    )


def convergence_slope(errors: Sequence[Tuple[int, float]]) -> float:
    """Least-squares slope of log(error) against log(1/steps)."""
    if len(errors) < 3:
        raise DomainError("convergence slope needs at least 3 points")
    steps = np.array([float(s) for s, _ in errors])
    values = np.array([float(e) for _, e in errors])
    if (values <= 0).any() or (steps <= 0).any():
        raise DomainError("steps and errors must be positive")
    abscissa = np.log(1.0 / steps)
    if np.var(abscissa) == 0.0:
        raise DomainError("degenerate abscissa: all step counts are equal")
    slope, _ = np.polyfit(abscissa, np.log(values), 1)
    return float(slope)


def cfg_sweep(
    field: VelocityField,
    gm: GaussianMixture,
    scales: Sequence[float],
    sampler_config: SamplerConfig,
    count_per_class: int,
    rng: torch.Generator,
) -> List[CfgSweepEntry]:
    """Per-scale energy distance of guided class samples to their class component."""
    if not gm.conditional:
        raise DomainError("cfg sweep needs a class-conditional dataset")
    entries = []
    for w in scales:
        guided = sampler_service.cfg_wrap(field, field, w, sampler_config.cfg_interval)
        per_class = {}
        for k in range(gm.num_components):
            x1 = sampler_service.prior_sample(rng, count_per_class, gm.dim)
            labels = torch.full((count_per_class,), k, dtype=torch.long)
            samples = sampler_service.sample(guided, x1, sampler_config, rng, labels)
            target = oracle_service.sample(gm.component(k), rng, count_per_class)
            per_class[k] = energy_distance(samples, target)
        entry = CfgSweepEntry(
            cfg_scale=w,
            energy_distance=float(np.mean(list(per_class.values()))),
            per_class=per_class,
        )
        logger.info(f"cfg sweep w={w}: energy distance {entry.energy_distance:.5f}")
        entries.append(entry)
    return entries


def field_grid_dump(field: VelocityField, gm: GaussianMixture, grid: GridSpec) -> pd.DataFrame:
    """Model and oracle velocities on a uniform grid, one row per (point, t)."""
    axis = torch.linspace(grid.lo, grid.hi, grid.points, dtype=torch.float64)
    if gm.dim == 1:
        points = axis[:, None]
    elif gm.dim == 2:
        g0, g1 = torch.meshgrid(axis, axis, indexing="ij")
        points = torch.stack([g0.reshape(-1), g1.reshape(-1)], dim=1)
    else:
        raise DomainError(f"grid dumps support dim 1 or 2, got {gm.dim}")
    frames = []
    for t in grid.times:
        with torch.no_grad():
            model_v = field(points, t, None)
        oracle_v = oracle_service.marginal_velocity(gm, points, t)
        columns = {f"x{d + 1}": points[:, d].numpy() for d in range(gm.dim)}
        columns["t"] = np.full(points.shape[0], t)
        for d in range(gm.dim):
            columns[f"model_v{d + 1}"] = model_v[:, d].numpy()
        for d in range(gm.dim):
            columns[f"oracle_v{d + 1}"] = oracle_v[:, d].numpy()
        frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True)
