"""
Dense-tensor differentiation built on torch.func.

Programs are plain callables over float64 tensors. Reverse mode (`grad`),
forward mode (`jvp`), several tangents at one primal (`jvp_multi`) and
gradients of losses whose body contains JVPs (`grad_through_jvp`) all compose,
because every transform here is a torch.func transform.
"""
import contextlib
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import torch
from torch import Tensor

from app.core.exceptions import NonScalarOutputError, ShapeMismatchError

logger = logging.getLogger(__name__)

GradientMap = Dict[str, Tensor]
Shape = Tuple[Optional[int], ...]

# Test-only hook applied to every JVP tangent output (see fault_injection)
_tangent_fault: Optional[Callable[[Tensor], Tensor]] = None


@dataclass(frozen=True)
class DualTensor:
    primal: Tensor
    tangent: Tensor

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise ShapeMismatchError("tangent", self.primal.shape, self.tangent.shape)


@dataclass(frozen=True)
class Program:
    """A differentiable callable with an optional declared input signature.

    A `None` extent in the signature matches any size (used for the batch axis).
    """
    fn: Callable[..., Tensor]
    signature: Optional[Tuple[Shape, ...]] = None
    name: str = "program"

    def __call__(self, *inputs: Tensor) -> Tensor:
        return self.fn(*inputs)

    def check_inputs(self, inputs: Sequence[Tensor]) -> None:
        if self.signature is None:
            return
        if len(inputs) != len(self.signature):
            raise ShapeMismatchError(
                f"{self.name} arity", (len(self.signature),), (len(inputs),)
            )
        for index, (declared, tensor) in enumerate(zip(self.signature, inputs)):
            actual = tuple(tensor.shape)
            if len(declared) != len(actual) or any(
                d is not None and d != a for d, a in zip(declared, actual)
            ):
                raise ShapeMismatchError(f"{self.name} input {index}", declared, actual)


def as_program(fn: Any) -> Program:
    return fn if isinstance(fn, Program) else Program(fn)


def _check_tangents(primals: Sequence[Tensor], tangents: Sequence[Tensor]) -> None:
    if len(primals) != len(tangents):
        raise ShapeMismatchError("tangent count", (len(primals),), (len(tangents),))
    for index, (p, t) in enumerate(zip(primals, tangents)):
        if p.shape != t.shape:
            raise ShapeMismatchError(f"tangent {index}", p.shape, t.shape)


def _require_scalar(out: Tensor) -> Tensor:
    if out.numel() != 1:
        raise NonScalarOutputError(
            f"expected a scalar output, got shape {tuple(out.shape)}"
        )
    return out.reshape(())


def evaluate(fn: Any, *inputs: Tensor) -> Tensor:
    """Plain evaluation, no derivative bookkeeping."""
    program = as_program(fn)
    program.check_inputs(inputs)
    with torch.no_grad():
        return program(*inputs)


def grad(
    scalar_fn: Callable[..., Tensor],
    params: Mapping[str, Tensor],
    *inputs: Any,
) -> GradientMap:
    """Reverse-mode gradient of `scalar_fn(params, *inputs)` w.r.t. every parameter."""
    grads, _ = value_and_grad(scalar_fn, params, *inputs)
    return grads


def value_and_grad(
    scalar_fn: Callable[..., Any],
    params: Mapping[str, Tensor],
    *inputs: Any,
    has_aux: bool = False,
) -> Tuple[GradientMap, Any]:
    """Like `grad` but also returns the value (or `(value, aux)` with `has_aux`)."""

    if has_aux:
        def wrapped(p):
            out, aux = scalar_fn(p, *inputs)
            return _require_scalar(out), aux
    else:
        def wrapped(p):
            return _require_scalar(scalar_fn(p, *inputs))

    grads, value = torch.func.grad_and_value(wrapped, has_aux=has_aux)(dict(params))
    return grads, value


def jvp(
    fn: Any,
    primals: Sequence[Tensor],
    tangents: Sequence[Tensor],
) -> Tuple[Tensor, Tensor]:
    """Forward-mode JVP: value and J(fn)(primals)·tangents from one forward pass."""
    program = as_program(fn)
    program.check_inputs(primals)
    _check_tangents(primals, tangents)
    value, tangent_out = torch.func.jvp(program.fn, tuple(primals), tuple(tangents))
    if _tangent_fault is not None:
        tangent_out = _tangent_fault(tangent_out)
    return value, tangent_out


def jvp_multi(
    fn: Any,
    primals: Sequence[Tensor],
    tangents: Sequence[Sequence[Tensor]],
) -> List[Tuple[Tensor, Tensor]]:
    """JVPs along k tangent sets sharing a single primal evaluation.

    The tangent sets are stacked and vmapped with the primals left unbatched,
    so vmap runs the primal computation once and only the tangent arithmetic
    carries the extra axis. The value is shared by every result.
    """
    if len(tangents) == 0:
        raise ValueError("jvp_multi needs at least one tangent set")
    program = as_program(fn)
    program.check_inputs(primals)
    for tangent_set in tangents:
        _check_tangents(primals, tangent_set)

    primals = tuple(primals)
    stacked = tuple(
        torch.stack([tangent_set[i] for tangent_set in tangents])
        for i in range(len(primals))
    )

    def single(*tangent_set):
        return torch.func.jvp(program.fn, primals, tangent_set)

    values, tangent_outs = torch.func.vmap(single, in_dims=0, out_dims=0)(*stacked)
    value = values[0]
    results = []
    for k in range(len(tangents)):
        tangent_out = tangent_outs[k]
        if _tangent_fault is not None:
            tangent_out = _tangent_fault(tangent_out)
        results.append((value, tangent_out))
    return results


def grad_through_jvp(
    loss_fn: Callable[[Mapping[str, Tensor], Sequence[Tensor], Sequence[Tensor]], Tensor],
    params: Mapping[str, Tensor],
    inputs: Sequence[Tensor],
    tangents: Sequence[Tensor],
) -> Tuple[GradientMap, Tuple[Tensor, ...]]:
    """Gradients of a scalar loss whose body calls `jvp`.

    `loss_fn(params, inputs, tangents)` is differentiated w.r.t. both the
    parameters and the tangent inputs (reverse over forward).
    """

    def wrapped(p, tan):
        return _require_scalar(loss_fn(p, tuple(inputs), tan))

    param_grads, tangent_grads = torch.func.grad(wrapped, argnums=(0, 1))(
        dict(params), tuple(tangents)
    )
    return param_grads, tuple(tangent_grads)


def finite_diff_jvp(
    fn: Any,
    primals: Sequence[Tensor],
    tangents: Sequence[Tensor],
    step: float = 1e-5,
) -> Tensor:
    """Central-difference directional derivative, the test oracle for `jvp`."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    program = as_program(fn)
    program.check_inputs(primals)
    _check_tangents(primals, tangents)
    with torch.no_grad():
        plus = program(*[p + step * t for p, t in zip(primals, tangents)])
        minus = program(*[p - step * t for p, t in zip(primals, tangents)])
    return (plus - minus) / (2.0 * step)


def finite_diff_grad(
    scalar_fn: Callable[..., Tensor],
    params: Mapping[str, Tensor],
    *inputs: Any,
    step: float = 1e-5,
    names: Optional[Sequence[str]] = None,
) -> GradientMap:
    """Central-difference gradient, one coordinate at a time. Slow; tests only."""
    base = {name: value.detach().clone() for name, value in params.items()}
    grads: GradientMap = {}
    with torch.no_grad():
        for name in names or list(base):
            flat = base[name].reshape(-1)
            out = torch.zeros_like(flat)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                plus = float(scalar_fn(base, *inputs))
                flat[i] = original - step
                minus = float(scalar_fn(base, *inputs))
                flat[i] = original
                out[i] = (plus - minus) / (2.0 * step)
            grads[name] = out.reshape(base[name].shape)
    return grads


def relative_error(actual: Tensor, expected: Tensor, floor: float = 1e-12) -> float:
    """Max-norm error of `actual` relative to the max-norm of `expected`."""
    scale = max(float(expected.abs().max()) if expected.numel() else 0.0, floor)
    return float((actual - expected).abs().max()) / scale


@contextlib.contextmanager
def fault_injection(fault: Callable[[Tensor], Tensor]) -> Iterator[None]:
    """Corrupt every JVP tangent output while active (negative controls only)."""
    global _tangent_fault
    previous = _tangent_fault
    _tangent_fault = fault
    logger.warning("JVP fault injection active")
    try:
        yield
    finally:
        _tangent_fault = previous
