import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Tuple

import torch
from torch import Tensor

from app.core.exceptions import DomainError, ShapeMismatchError
from app.models.flow_path import TrainingBatch
from app.models.network import Parameters
from app.schemas.config import ContrastiveKind, LossWeights
from app.services import network_service

logger = logging.getLogger(__name__)

SIGMOID_CLAMP = 1e-12
MIN_TIME_GAP = 1e-6

Contrastive = Callable[[Tensor, Tensor], Tensor]


# Flow matching

def fm_loss(v_hat: Tensor, v_bar: Tensor) -> Tensor:
    """Batch mean of (1/n)·‖v_hat − v_bar‖²."""
    if v_hat.shape != v_bar.shape:
        raise ShapeMismatchError("v_hat", tuple(v_bar.shape), tuple(v_hat.shape))
    diff = v_hat - v_bar
    return ((diff * (1.0 / diff.shape[-1])) * diff).sum(dim=-1).mean()


@dataclass(frozen=True)
class SpdMatrix:
    M: Tensor

    def __post_init__(self):
        if self.M.dim() != 2 or self.M.shape[0] != self.M.shape[1]:
            raise ShapeMismatchError("SPD matrix", ("n", "n"), tuple(self.M.shape))
        if float((self.M - self.M.T).abs().max()) > 1e-12:
            raise DomainError("matrix is not symmetric")
        _, info = torch.linalg.cholesky_ex(self.M)
        if int(info) != 0:
            raise DomainError("matrix is not positive definite (Cholesky failed)")

    @classmethod
    def scaled_identity(cls, n: int) -> "SpdMatrix":
        return cls(torch.eye(n, dtype=torch.float64) / n)


def spd_loss(v_hat: Tensor, v_bar: Tensor, M: SpdMatrix) -> Tensor:
    """Batch mean of (v_hat − v_bar)ᵀ M (v_hat − v_bar)."""
    if v_hat.shape != v_bar.shape:
        raise ShapeMismatchError("v_hat", tuple(v_bar.shape), tuple(v_hat.shape))
    diff = v_hat - v_bar
    return ((diff @ M.M) * diff).sum(dim=-1).mean()


# Contrastive functions, elementwise over logits

def f_ls(a: Tensor, b: Tensor) -> Tensor:
    return (a - 1.0).pow(2) + (b + 1.0).pow(2)


def _clamped_sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x).clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)


def f_ns(a: Tensor, b: Tensor) -> Tensor:
    return -torch.log(_clamped_sigmoid(a)) - torch.log(1.0 - _clamped_sigmoid(b))


def f_hinge_d(a: Tensor, b: Tensor) -> Tensor:
    return torch.relu(1.0 - a) + torch.relu(1.0 + b)


def f_hinge_g(a: Tensor, b: Tensor) -> Tensor:
    return -a + b


def df_ls_da(a: Tensor) -> Tensor:
    return 2.0 * (a - 1.0)


def f_relativistic(a: Tensor, b: Tensor) -> Tensor:
    """−log σ(a − b), the AFM pairing."""
    return -torch.log(_clamped_sigmoid(a - b))


# (discriminator form, generator form)
CONTRASTIVE: Dict[ContrastiveKind, Tuple[Contrastive, Contrastive]] = {
    ContrastiveKind.LS: (f_ls, f_ls),
    ContrastiveKind.NS: (f_ns, f_ns),
    ContrastiveKind.HINGE: (f_hinge_d, f_hinge_g),
}


# Continuous adversarial objectives

def cafm_d_terms(
    d_params: Parameters,
    batch: TrainingBatch,
    g_output: Tensor,
    t_dot: float,
    f: Contrastive,
    d_tensors: Optional[Mapping[str, Tensor]] = None,
) -> Dict[str, Tensor]:
    """Adversarial and centering terms of the D step from one shared D evaluation."""
    d_value, real_logit, fake_logit = network_service.d_jvp_pair(
        d_params, batch.x_t, batch.t, batch.v_bar, g_output.detach(), t_dot, batch.c, d_tensors
    )
    return {
        "adv": f(real_logit, fake_logit).mean(),
        "cp": d_value.pow(2).mean(),
        "real_logit": real_logit,
        "fake_logit": fake_logit,
        "d_value": d_value,
    }


def cafm_d_loss(
    d_params: Parameters,
    batch: TrainingBatch,
    g_output: Tensor,
    t_dot: float,
    f: Contrastive,
    d_tensors: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """mean f(D_jvp(v̄), D_jvp(G)) with G's output held constant."""
    return cafm_d_terms(d_params, batch, g_output, t_dot, f, d_tensors)["adv"]


def cafm_g_terms(
    g_params: Parameters,
    d_params: Parameters,
    batch: TrainingBatch,
    t_dot: float,
    f: Contrastive,
    g_tensors: Optional[Mapping[str, Tensor]] = None,
) -> Dict[str, Tensor]:
    g_output = network_service.g_forward(g_params, batch.x_t, batch.t, batch.c, g_tensors)
    frozen = {name: value.detach() for name, value in d_params.items()}
    _, real_logit, fake_logit = network_service.d_jvp_pair(
        d_params, batch.x_t, batch.t, batch.v_bar, g_output, t_dot, batch.c, frozen
    )
    return {
        "adv": f(fake_logit, real_logit.detach()).mean(),
        "g_output": g_output,
        "real_logit": real_logit,
        "fake_logit": fake_logit,
    }


def cafm_g_loss(
    g_params: Parameters,
    d_params: Parameters,
    batch: TrainingBatch,
    t_dot: float,
    f: Contrastive,
    g_tensors: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """mean f(D_jvp(G), D_jvp(v̄)); gradients reach G only through the tangent slot."""
    return cafm_g_terms(g_params, d_params, batch, t_dot, f, g_tensors)["adv"]


def centering_penalty(
    d_params: Parameters,
    batch: TrainingBatch,
    d_tensors: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    return network_service.d_forward(d_params, batch.x_t, batch.t, batch.c, d_tensors).pow(2).mean()


def ot_reg_continuous(g_output: Tensor, n: int) -> Tensor:
    return g_output.pow(2).sum(dim=-1).mean() / n


# Discrete-time (AFM) objectives

def _d(d_params, x, t, c, d_tensors):
    return network_service.d_forward(d_params, x, t, c, d_tensors)


def afm_adv_d(
    d_params: Parameters,
    real_xt: Tensor,
    fake_xt: Tensor,
    t: Tensor,
    c: Optional[Tensor] = None,
    d_tensors: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    return f_relativistic(_d(d_params, real_xt, t, c, d_tensors), _d(d_params, fake_xt.detach(), t, c, d_tensors)).mean()


def afm_adv_g(
    d_params: Parameters,
    real_xt: Tensor,
    fake_xt: Tensor,
    t: Tensor,
    c: Optional[Tensor] = None,
) -> Tensor:
    frozen = {name: value.detach() for name, value in d_params.items()}
    return f_relativistic(_d(d_params, fake_xt, t, c, frozen), _d(d_params, real_xt, t, c, frozen)).mean()


def ot_discrete(g_out: Tensor, x_s: Tensor, s: Tensor, t: Tensor, n: int) -> Tensor:
    """mean (1/n)·‖g_out − x_s‖²/|t − s|."""
    gap = (torch.as_tensor(t, dtype=torch.float64) - torch.as_tensor(s, dtype=torch.float64)).abs()
    if bool((gap < MIN_TIME_GAP).any()):
        raise DomainError(f"|t - s| must be at least {MIN_TIME_GAP}; use ot_reg_continuous for the limit")
    gap = gap.expand(g_out.shape[0]) if gap.dim() == 0 else gap
    return ((g_out - x_s).pow(2).sum(dim=-1) / (n * gap)).mean()


def _input_gradient_penalty(d_params, x, t, c, d_tensors) -> Tensor:
    # Rows are independent, so the gradient of the row sum is the per-row gradient
    def total(inputs):
        return _d(d_params, inputs, t, c, d_tensors).sum()

    grads = torch.func.grad(total)(x)
    return grads.pow(2).sum(dim=-1).mean()


def r1_penalty(
    d_params: Parameters,
    real_xt: Tensor,
    t: Tensor,
    c: Optional[Tensor] = None,
    d_tensors: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    return _input_gradient_penalty(d_params, real_xt, t, c, d_tensors)


def r2_penalty(
    d_params: Parameters,
    fake_xt: Tensor,
    t: Tensor,
    c: Optional[Tensor] = None,
    d_tensors: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    return _input_gradient_penalty(d_params, fake_xt.detach(), t, c, d_tensors)


def cp_penalty_discrete(
    d_params: Parameters,
    real_xt: Tensor,
    fake_xt: Tensor,
    t: Tensor,
    c: Optional[Tensor] = None,
    d_tensors: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    return (_d(d_params, real_xt, t, c, d_tensors) + _d(d_params, fake_xt.detach(), t, c, d_tensors)).pow(2).mean()


# Totals

def total_d_loss(
    weights: LossWeights,
    adv: Tensor,
    cp: Tensor,
    r1: Optional[Tensor] = None,
    r2: Optional[Tensor] = None,
) -> Tensor:
    """CAFM: adv + λ_cp·cp. AFM (penalties given): adv + λ_gp·(R1 + R2) + λ_cp·cp."""
    total = adv + weights.lambda_cp * cp
    if r1 is not None or r2 is not None:
        penalty = (r1 if r1 is not None else 0.0) + (r2 if r2 is not None else 0.0)
        total = total + weights.lambda_gp * penalty
    return total


def total_g_loss(weights: LossWeights, adv: Tensor, ot: Tensor, lambda_ot: Optional[float] = None) -> Tensor:
    """adv + λ_ot·ot; `lambda_ot` overrides the weight when a schedule is active."""
    weight = weights.lambda_ot if lambda_ot is None else lambda_ot
    return adv + weight * ot
