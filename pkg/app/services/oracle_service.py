"""
Closed-form ground truth for Gaussian mixtures under the linear path.

Given component k, x_t ~ Normal((1−t)μ_k, c_k(t)·I) with c_k(t) = (1−t)²σ_k² + t².
Every quantity below follows from that and from Gaussian conditioning.
"""
import logging
import math
from typing import Callable, Optional, Tuple, Union

import torch
from torch import Tensor

from app.core.exceptions import DomainError
from app.models.mixture import GaussianMixture

logger = logging.getLogger(__name__)

TimeLike = Union[float, Tensor]
QUADRATURE_MARGIN = 1e-3


def sample(
    gm: GaussianMixture,
    rng: torch.Generator,
    count: int,
    return_labels: bool = False,
) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """Draw `count` points; optionally also the component index of each."""
    if count < 0:
        raise DomainError(f"count must be non-negative, got {count}")
    if count == 0:
        x = torch.zeros(0, gm.dim, dtype=torch.float64)
        labels = torch.zeros(0, dtype=torch.long)
    else:
        labels = torch.multinomial(gm.weights, count, replacement=True, generator=rng)
        noise = torch.randn(count, gm.dim, generator=rng, dtype=torch.float64)
        x = gm.means[labels] + gm.stds[labels, None] * noise
    return (x, labels) if return_labels else x


def _times(t: TimeLike, rows: int) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.dim() == 0:
        t = t.expand(rows)
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise DomainError("t must lie in [0, 1]")
    return t


def _component_terms(gm: GaussianMixture, x_t: Tensor, t: TimeLike):
    """Per-row, per-component pieces: (t, diff, c, log joint density)."""
    t = _times(t, x_t.shape[0])[:, None]  # (B, 1)
    centers = (1.0 - t)[:, :, None] * gm.means[None]  # (B, K, n)
    diff = x_t[:, None, :] - centers
    c = (1.0 - t).pow(2) * gm.stds.pow(2)[None] + t.pow(2)  # (B, K)
    n = gm.dim
    log_normal = -0.5 * diff.pow(2).sum(-1) / c - 0.5 * n * torch.log(2.0 * math.pi * c)
    log_joint = torch.log(gm.weights)[None] + log_normal
    return t, diff, c, log_joint


def _masked(gm: GaussianMixture, log_joint: Tensor, classes: Optional[Tensor]) -> Tensor:
    if classes is None or not gm.conditional:
        return log_joint
    k = torch.arange(gm.num_components)
    keep = (classes[:, None] == k[None]) | (classes[:, None] == gm.null_class)
    return torch.where(keep, log_joint, torch.full_like(log_joint, -math.inf))


def responsibilities(gm: GaussianMixture, x_t: Tensor, t: TimeLike,
                     classes: Optional[Tensor] = None) -> Tensor:
    """Posterior component probabilities p(k | x_t), shape (B, K).

    A class label restricts the posterior to its component; the null class does not.
    """
    _, _, _, log_joint = _component_terms(gm, x_t, t)
    return torch.softmax(_masked(gm, log_joint, classes), dim=-1)


def marginal_velocity(gm: GaussianMixture, x_t: Tensor, t: TimeLike,
                      classes: Optional[Tensor] = None) -> Tensor:
    t_col, diff, c, log_joint = _component_terms(gm, x_t, t)
    r = torch.softmax(_masked(gm, log_joint, classes), dim=-1)
    scaled = diff / c[:, :, None]
    e_z = t_col[:, :, None] * scaled
    e_x = gm.means[None] + ((1.0 - t_col) * gm.stds.pow(2)[None])[:, :, None] * scaled
    return (r[:, :, None] * (e_z - e_x)).sum(dim=1)


def marginal_score(gm: GaussianMixture, x_t: Tensor, t: TimeLike,
                   classes: Optional[Tensor] = None) -> Tensor:
    _, diff, c, log_joint = _component_terms(gm, x_t, t)
    r = torch.softmax(_masked(gm, log_joint, classes), dim=-1)
    return (r[:, :, None] * (-diff / c[:, :, None])).sum(dim=1)


def log_density_t(gm: GaussianMixture, x_t: Tensor, t: TimeLike) -> Tensor:
    """log p_t(x_t) per row."""
    _, _, _, log_joint = _component_terms(gm, x_t, t)
    return torch.logsumexp(log_joint, dim=-1)


def velocity_to_score(v: Tensor, x_t: Tensor, t: TimeLike, t_floor: float = 1e-3) -> Tensor:
    """Score from velocity for the linear path with a standard normal prior.

    E[z | x_t] = x_t + (1−t)·v and the score is −E[z | x_t]/t.
    """
    t = torch.as_tensor(t, dtype=torch.float64)
    if bool((t < t_floor).any()):
        raise DomainError(f"velocity_to_score needs t >= {t_floor}, got {float(t.min())}")
    if t.dim() == 1:
        t = t[:, None]
    return -(x_t + (1.0 - t) * v) / t


def _posterior_bounds(gm: GaussianMixture, x_t: Tensor, t: float, width: float):
    """Per-row, per-axis integration bounds covering `width` posterior stds."""
    t_col, diff, c, log_joint = _component_terms(gm, x_t, t)
    r = torch.softmax(log_joint, dim=-1)
    post_mean = gm.means[None] + ((1.0 - t_col) * gm.stds.pow(2)[None])[:, :, None] * diff / c[:, :, None]
    post_std = (gm.stds[None] * t_col / torch.sqrt(c))[:, :, None]
    relevant = (r > 1e-14)[:, :, None]
    lo = torch.where(relevant, post_mean - width * post_std, torch.full_like(post_mean, math.inf)).amin(dim=1)
    hi = torch.where(relevant, post_mean + width * post_std, torch.full_like(post_mean, -math.inf)).amax(dim=1)
    return lo, hi


def _posterior_mean_velocity(gm: GaussianMixture, x_row: Tensor, t: float, nodes: Tensor) -> Tensor:
    """E[v̄ | x_t] for one row by trapezoid quadrature over x on `nodes` (P, n)."""
    log_prior = log_density_t(gm, nodes, 0.0)
    residual = x_row[None] - (1.0 - t) * nodes
    log_lik = -0.5 * residual.pow(2).sum(-1) / t ** 2
    log_w = log_prior + log_lik
    weights = torch.exp(log_w - log_w.max())
    v_bar = residual / t - nodes
    return weights, v_bar


def quadrature_conditional_velocity(
    gm: GaussianMixture,
    x_t: Tensor,
    t: float,
    nodes_1d: int = 4096,
    nodes_2d: int = 512,
    width: float = 8.0,
) -> Tensor:
    """Brute-force E[v̄ | x_t] by integrating over the data posterior p(x | x_t).

    Independent of the closed-form velocity except for the choice of bounds.
    """
    if gm.dim not in (1, 2):
        raise DomainError(f"quadrature supports dim 1 or 2, got {gm.dim}")
    t = float(t)
    if not QUADRATURE_MARGIN <= t <= 1.0 - QUADRATURE_MARGIN:
        raise DomainError(f"quadrature needs t in [{QUADRATURE_MARGIN}, {1 - QUADRATURE_MARGIN}], got {t}")
    if nodes_1d < 2048:
        raise DomainError("1-D quadrature needs at least 2048 nodes")

    lo, hi = _posterior_bounds(gm, x_t, t, width)
    out = torch.empty_like(x_t)
    if gm.dim == 1:
        # All rows at once: grid (B, P)
        u = torch.linspace(0.0, 1.0, nodes_1d, dtype=torch.float64)
        grid = lo + (hi - lo) * u[None]
        flat = grid.reshape(-1, 1)
        log_prior = log_density_t(gm, flat, 0.0).reshape(grid.shape)
        residual = x_t - (1.0 - t) * grid
        log_w = log_prior - 0.5 * residual.pow(2) / t ** 2
        weights = torch.exp(log_w - log_w.amax(dim=1, keepdim=True))
        v_bar = residual / t - grid
        numer = torch.trapezoid(weights * v_bar, grid, dim=1)
        denom = torch.trapezoid(weights, grid, dim=1)
        out[:, 0] = numer / denom
        return out

    u = torch.linspace(0.0, 1.0, nodes_2d, dtype=torch.float64)
    for row in range(x_t.shape[0]):
        ax0 = lo[row, 0] + (hi[row, 0] - lo[row, 0]) * u
        ax1 = lo[row, 1] + (hi[row, 1] - lo[row, 1]) * u
        g0, g1 = torch.meshgrid(ax0, ax1, indexing="ij")
        nodes = torch.stack([g0.reshape(-1), g1.reshape(-1)], dim=1)
        weights, v_bar = _posterior_mean_velocity(gm, x_t[row], t, nodes)
        weights = weights.reshape(nodes_2d, nodes_2d)
        denom = torch.trapezoid(torch.trapezoid(weights, ax1, dim=1), ax0, dim=0)
        for d in range(2):
            integrand = (weights * v_bar[:, d].reshape(nodes_2d, nodes_2d))
            out[row, d] = torch.trapezoid(torch.trapezoid(integrand, ax1, dim=1), ax0, dim=0) / denom
    return out


def oracle_field(gm: GaussianMixture) -> Callable[..., Tensor]:
    """The analytic marginal velocity as a sampler field (x, t, c) -> v."""

    def field(x: Tensor, t: TimeLike, c: Optional[Tensor] = None) -> Tensor:
        return marginal_velocity(gm, x, t, classes=c)

    return field
