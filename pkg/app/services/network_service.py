import logging
import math
from collections import OrderedDict
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import torch
from torch import Tensor

from app.core import autodiff
from app.core.exceptions import DomainError, ShapeMismatchError
from app.models.network import EmaState, Parameters, build_module, mlp_apply, rms_norm
from app.schemas.config import MlpSpec

logger = logging.getLogger(__name__)

TimeLike = Union[float, Tensor]


def init(spec: MlpSpec, seed: Union[int, torch.Generator], zero_head: bool = True) -> Parameters:
    """Variance-scaled (1/fan_in) weights, zero biases, unit gains, zero output layer."""
    rng = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    module = build_module(spec)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, param in module.named_parameters():
        shape = tuple(param.shape)
        if name.startswith("head.") and zero_head:
            value = torch.zeros(shape, dtype=torch.float64)
        elif name == "class_embed.weight":
            value = torch.randn(shape, generator=rng, dtype=torch.float64)
        elif name.endswith("linear.weight") or name == "head.weight":
            value = torch.randn(shape, generator=rng, dtype=torch.float64) / math.sqrt(shape[1])
        elif name.endswith("gain") or name.endswith("norm.weight"):
            value = torch.ones(shape, dtype=torch.float64)
        else:
            value = torch.zeros(shape, dtype=torch.float64)
        tensors[name] = value
    return Parameters(spec, tensors)


def _times(spec: MlpSpec, t: TimeLike, batch: int) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.dim() == 0:
        t = (t.expand(batch) if spec.num_times == 1 else t.expand(batch, spec.num_times)).clone()
    expected = (batch,) if spec.num_times == 1 else (batch, spec.num_times)
    if tuple(t.shape) != expected:
        raise ShapeMismatchError("t", expected, tuple(t.shape))
    return t


def _classes(spec: MlpSpec, c: Optional[Tensor], batch: int) -> Optional[Tensor]:
    if not spec.num_classes:
        if c is not None:
            raise DomainError("class labels given to an unconditional network")
        return None
    if c is None:
        return torch.full((batch,), spec.num_classes - 1, dtype=torch.long)
    c = torch.as_tensor(c, dtype=torch.long)
    if c.dim() == 0:
        c = c.expand(batch)
    if bool((c < 0).any()) or bool((c >= spec.num_classes).any()):
        raise DomainError(f"class index out of range [0, {spec.num_classes})")
    return c


def _check_x(spec: MlpSpec, x: Tensor) -> None:
    if x.dim() != 2 or x.shape[1] != spec.in_dim:
        raise ShapeMismatchError("x_t", (x.shape[0] if x.dim() else 0, spec.in_dim), tuple(x.shape))


def functional_forward(spec: MlpSpec) -> Callable[..., Tensor]:
    """fn(tensors, x, t, c) evaluating the network with an explicit parameter map."""

    def fn(tensors: Mapping[str, Tensor], x: Tensor, t: Tensor, c: Optional[Tensor] = None) -> Tensor:
        return mlp_apply(spec, tensors, x, t, c)

    return fn


def forward(params: Parameters, x_t: Tensor, t: TimeLike, c: Optional[Tensor] = None,
            tensors: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """Network output; `tensors` overrides the stored values (for torch.func transforms)."""
    spec = params.spec
    _check_x(spec, x_t)
    batch = x_t.shape[0]
    return functional_forward(spec)(
        params.tensors if tensors is None else tensors,
        x_t, _times(spec, t, batch), _classes(spec, c, batch),
    )


def g_forward(params: Parameters, x_t: Tensor, t: TimeLike, c: Optional[Tensor] = None,
              tensors: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    return forward(params, x_t, t, c, tensors)


def d_forward(params: Parameters, x_t: Tensor, t: TimeLike, c: Optional[Tensor] = None,
              tensors: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    return forward(params, x_t, t, c, tensors)


def d_program(params: Parameters, c: Optional[Tensor] = None,
              tensors: Optional[Mapping[str, Tensor]] = None) -> autodiff.Program:
    """D as a program of (x_t, t) for forward-mode differentiation."""
    spec = params.spec
    fn = functional_forward(spec)
    values = params.tensors if tensors is None else tensors

    def program(x: Tensor, t: Tensor) -> Tensor:
        return fn(values, x, t, _classes(spec, c, x.shape[0]))

    return autodiff.Program(program, signature=((None, spec.in_dim), (None,)), name="discriminator")


def _time_tangent(t_dot: TimeLike, batch: int) -> Tensor:
    t_dot = torch.as_tensor(t_dot, dtype=torch.float64)
    return t_dot.expand(batch).clone() if t_dot.dim() == 0 else t_dot


def d_jvp(
    params: Parameters,
    x_t: Tensor,
    t: TimeLike,
    x_dot: Tensor,
    t_dot: TimeLike = 1.0,
    c: Optional[Tensor] = None,
    tensors: Optional[Mapping[str, Tensor]] = None,
) -> Tuple[Tensor, Tensor]:
    """(D(x_t, t), ∂D/∂x·x_dot + ∂D/∂t·t_dot) per row, from one forward pass."""
    _check_x(params.spec, x_t)
    batch = x_t.shape[0]
    t = _times(params.spec, t, batch)
    return autodiff.jvp(
        d_program(params, c, tensors), (x_t, t), (x_dot, _time_tangent(t_dot, batch))
    )


def d_jvp_pair(
    params: Parameters,
    x_t: Tensor,
    t: TimeLike,
    x_dot_real: Tensor,
    x_dot_fake: Tensor,
    t_dot: TimeLike = 1.0,
    c: Optional[Tensor] = None,
    tensors: Optional[Mapping[str, Tensor]] = None,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Real and fake JVP logits sharing a single evaluation of D."""
    _check_x(params.spec, x_t)
    batch = x_t.shape[0]
    t = _times(params.spec, t, batch)
    time_tangent = _time_tangent(t_dot, batch)
    (value, jvp_real), (_, jvp_fake) = autodiff.jvp_multi(
        d_program(params, c, tensors),
        (x_t, t),
        [(x_dot_real, time_tangent), (x_dot_fake, time_tangent)],
    )
    return value, jvp_real, jvp_fake


def ema_init(params: Parameters, decay: float) -> EmaState:
    return EmaState(shadow=params.clone(), decay=decay)


def ema_update(ema: EmaState, params: Parameters) -> EmaState:
    """shadow ← decay·shadow + (1−decay)·params, elementwise."""
    if ema.shadow.names() != params.names():
        raise ShapeMismatchError("ema parameters", (len(ema.shadow.names()),), (len(params.names()),))
    weight = 1.0 - ema.decay
    with torch.no_grad():
        shadow: Dict[str, Tensor] = {
            name: torch.lerp(ema.shadow[name], params[name].detach(), weight)
            for name in ema.shadow
        }
    return EmaState(shadow=ema.shadow.replace(shadow), decay=ema.decay)


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    return rms_norm(x, gain)
