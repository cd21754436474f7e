import logging
from typing import Optional, Union

import torch
from torch import Tensor

from app.core.exceptions import DomainError
from app.models.flow_path import FlowPath, TrainingBatch
from app.models.mixture import GaussianMixture
from app.schemas.config import TimeSampler, TimeSamplerKind
from app.services import oracle_service

logger = logging.getLogger(__name__)

TimeLike = Union[float, Tensor]


def _as_time(t: TimeLike, batch: int) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.dim() == 0:
        t = t.expand(batch)
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise DomainError(f"t must lie in [0, 1], got range [{float(t.min())}, {float(t.max())}]")
    return t


def interpolate(path: FlowPath, x: Tensor, z: Tensor, t: TimeLike) -> Tensor:
    """x_t = A(t)·x + B(t)·z, rowwise."""
    if x.shape != z.shape:
        raise DomainError(f"x and z shapes differ: {tuple(x.shape)} vs {tuple(z.shape)}")
    t = _as_time(t, x.shape[0])[:, None]
    return path.A(t) * x + path.B(t) * z


def conditional_velocity(path: FlowPath, x: Tensor, z: Tensor, t: TimeLike) -> Tensor:
    """v̄_t = dA(t)·x + dB(t)·z; z − x on the linear path."""
    if x.shape != z.shape:
        raise DomainError(f"x and z shapes differ: {tuple(x.shape)} vs {tuple(z.shape)}")
    t = _as_time(t, x.shape[0])[:, None]
    return path.dA(t) * x + path.dB(t) * z


def sample_time(sampler: TimeSampler, rng: torch.Generator, batch: int) -> Tensor:
    if batch < 1:
        raise DomainError(f"batch must be at least 1, got {batch}")
    if sampler.kind == TimeSamplerKind.UNIFORM:
        u = torch.rand(batch, generator=rng, dtype=torch.float64)
        return sampler.t_min + (sampler.t_max - sampler.t_min) * u
    n = sampler.mu + sampler.sigma * torch.randn(batch, generator=rng, dtype=torch.float64)
    return torch.sigmoid(n).clamp(sampler.t_min, sampler.t_max)


def sample_batch(
    dataset: GaussianMixture,
    path: FlowPath,
    sampler: TimeSampler,
    rng: torch.Generator,
    batch: int,
    cfg_dropout_prob: float = 0.0,
    t: Optional[Tensor] = None,
) -> TrainingBatch:
    """Independent (x, z) coupling at sampled times, with CFG label dropout.

    Draw order per call is fixed: data, noise, times, dropout mask.
    """
    if not 0.0 <= cfg_dropout_prob <= 1.0:
        raise DomainError(f"cfg_dropout_prob must lie in [0, 1], got {cfg_dropout_prob}")
    x, labels = oracle_service.sample(dataset, rng, batch, return_labels=True)
    z = torch.randn(batch, dataset.dim, generator=rng, dtype=torch.float64)
    if t is None:
        t = sample_time(sampler, rng, batch)
    c = None
    if dataset.conditional:
        drop = torch.rand(batch, generator=rng, dtype=torch.float64) < cfg_dropout_prob
        c = torch.where(drop, torch.full_like(labels, dataset.null_class), labels)
    return TrainingBatch(
        x=x,
        z=z,
        t=t,
        x_t=interpolate(path, x, z, t),
        v_bar=conditional_velocity(path, x, z, t),
        c=c,
    )
