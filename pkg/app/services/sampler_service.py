"""
Integrators that carry prior samples at t=1 to data at t=0.

A velocity field is any callable `field(x, t, c)` with `t` a float. Steps move
in descending t, so each update subtracts h·v.
"""
import logging
import math
from typing import Callable, Optional, Sequence

import torch
from torch import Tensor
from tqdm import tqdm

from app.core.config import settings
from app.core.exceptions import DomainError, NonFiniteError
from app.models.network import Parameters
from app.schemas.config import SamplerConfig, SamplerKind
from app.services import network_service
from app.services.oracle_service import velocity_to_score

logger = logging.getLogger(__name__)

VelocityField = Callable[..., Tensor]
StepFn = Callable[[Tensor, float, float], Tensor]


def time_grid(config: SamplerConfig) -> Tensor:
    """Uniform grid from t_start down to t_end with `steps` intervals."""
    return torch.linspace(config.t_start, config.t_end, config.steps + 1, dtype=torch.float64)


def prior_sample(rng: torch.Generator, count: int, dim: int) -> Tensor:
    return torch.randn(count, dim, generator=rng, dtype=torch.float64)


def _check_finite(x: Tensor, step: int) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError("sampler state became non-finite", step=step, phase="sampling")


def _steps(grid: Tensor, desc: str):
    pairs = list(zip(grid[:-1].tolist(), grid[1:].tolist()))
    return tqdm(enumerate(pairs), total=len(pairs), desc=desc, disable=not settings.SHOW_PROGRESS)


def euler_ode(
    field: VelocityField,
    x1: Tensor,
    config: SamplerConfig,
    rng: Optional[torch.Generator] = None,
    c: Optional[Tensor] = None,
    grid: Optional[Tensor] = None,
) -> Tensor:
    grid = time_grid(config) if grid is None else grid
    x = x1
    for i, (t, t_next) in _steps(grid, "euler"):
        x = x - (t - t_next) * field(x, t, c)
        _check_finite(x, i)
    return x


def heun_ode(
    field: VelocityField,
    x1: Tensor,
    config: SamplerConfig,
    rng: Optional[torch.Generator] = None,
    c: Optional[Tensor] = None,
    grid: Optional[Tensor] = None,
) -> Tensor:
    """Predictor-corrector: average of the slopes at both ends of each step."""
    grid = time_grid(config) if grid is None else grid
    x = x1
    for i, (t, t_next) in _steps(grid, "heun"):
        h = t - t_next
        k1 = field(x, t, c)
        k2 = field(x - h * k1, t_next, c)
        x = x - h * 0.5 * (k1 + k2)
        _check_finite(x, i)
    return x


def _split_at(grid: Tensor, t_split: float) -> Tensor:
    """Insert t_split into a descending grid when a step crosses it."""
    if bool((grid == t_split).any()) or not bool(((grid[:-1] > t_split) & (grid[1:] < t_split)).any()):
        return grid
    point = torch.tensor([t_split], dtype=grid.dtype)
    return torch.cat([grid[grid > t_split], point, grid[grid < t_split]])


def euler_maruyama_sde(
    field: VelocityField,
    x1: Tensor,
    config: SamplerConfig,
    rng: torch.Generator,
    c: Optional[Tensor] = None,
    grid: Optional[Tensor] = None,
) -> Tensor:
    """Marginal-preserving reverse SDE with diffusion w(t) = scale·t.

    x ← x − v·h + (w/2)·s·h + sqrt(w·h)·ξ, where s is the score recovered from
    v. The stochastic part runs down to exactly sde_t_floor; the segment below
    it is integrated with plain Euler steps.
    """
    grid = time_grid(config) if grid is None else grid
    scale = config.sde_diffusion_scale
    floor = config.sde_t_floor
    if scale != 0.0:
        grid = _split_at(grid, floor)
    x = x1
    for i, (t, t_next) in _steps(grid, "sde"):
        h = t - t_next
        v = field(x, t, c)
        if scale == 0.0 or t_next < floor:
            x = x - h * v
        else:
            w = scale * t
            s = velocity_to_score(v, x, t, t_floor=config.sde_t_floor)
            noise = torch.randn(x.shape, generator=rng, dtype=torch.float64)
            x = x - h * v + (0.5 * w * h) * s + math.sqrt(w * h) * noise
        _check_finite(x, i)
    return x


def cfg_wrap(
    field_cond: VelocityField,
    field_uncond: VelocityField,
    w: float,
    interval: Sequence[float] = (0.0, 1.0),
) -> VelocityField:
    """v_u + w·(v_c − v_u) inside the interval, v_c outside; w = 1 returns field_cond itself."""
    if w < 0:
        raise DomainError(f"cfg scale must be non-negative, got {w}")
    if w == 1.0:
        return field_cond
    lo, hi = interval

    def guided(x: Tensor, t: float, c: Optional[Tensor] = None) -> Tensor:
        v_c = field_cond(x, t, c)
        if not lo <= t <= hi:
            return v_c
        v_u = field_uncond(x, t, None)
        return v_u + w * (v_c - v_u)

    return guided


def afm_difference_sampler(step_fn: StepFn, x1: Tensor, tau: Sequence[float]) -> Tensor:
    """Iterate x ← step_fn(x, τ_i, τ_{i−1}) from i = S down to 1.

    `tau` lists τ_0 = 0 < τ_1 < ... < τ_S = 1.
    """
    tau = [float(v) for v in tau]
    if len(tau) < 2 or tau[0] != 0.0 or tau[-1] != 1.0:
        raise DomainError("tau must run from 0 to 1 with at least one step")
    if any(b <= a for a, b in zip(tau[:-1], tau[1:])):
        raise DomainError("tau must be strictly increasing")
    x = x1
    for i in range(len(tau) - 1, 0, -1):
        x = x + (step_fn(x, tau[i], tau[i - 1]) - x)
        _check_finite(x, len(tau) - 1 - i)
    return x


def sample(
    field: VelocityField,
    x1: Tensor,
    config: SamplerConfig,
    rng: Optional[torch.Generator] = None,
    c: Optional[Tensor] = None,
) -> Tensor:
    if config.kind == SamplerKind.EULER:
        return euler_ode(field, x1, config, rng, c)
    if config.kind == SamplerKind.HEUN:
        return heun_ode(field, x1, config, rng, c)
    if rng is None:
        raise DomainError("the SDE sampler needs a random generator")
    return euler_maruyama_sde(field, x1, config, rng, c)


def model_field(params: Parameters) -> VelocityField:
    """The generator as a sampler field, evaluated without gradient tracking."""

    def field(x: Tensor, t: float, c: Optional[Tensor] = None) -> Tensor:
        with torch.no_grad():
            return network_service.g_forward(params, x, t, c)

    return field


def afm_step_fn(params: Parameters) -> StepFn:
    """Discrete generator x_s ↦ x_s + (t − s)·G(x_s, s, t)."""

    def step(x_s: Tensor, s: float, t: float) -> Tensor:
        times = torch.tensor([s, t], dtype=torch.float64).expand(x_s.shape[0], 2)
        with torch.no_grad():
            return x_s + (t - s) * network_service.g_forward(params, x_s, times)

    return step


def uniform_tau(steps: int) -> Tensor:
    return torch.linspace(0.0, 1.0, steps + 1, dtype=torch.float64)
