from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor

from app.core.exceptions import ShapeMismatchError

Schedule = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class FlowPath:
    """Interpolation x_t = A(t)·x + B(t)·z between data (t=0) and prior (t=1)."""
    name: str
    A: Schedule
    B: Schedule
    dA: Schedule
    dB: Schedule


LINEAR_PATH = FlowPath(
    name="linear",
    A=lambda t: 1.0 - t,
    B=lambda t: t,
    dA=lambda t: -torch.ones_like(t),
    dB=lambda t: torch.ones_like(t),
)


@dataclass
class TrainingBatch:
    x: Tensor
    z: Tensor
    t: Tensor
    x_t: Tensor
    v_bar: Tensor
    c: Optional[Tensor] = None

    def __post_init__(self):
        if self.x.dim() != 2:
            raise ShapeMismatchError("batch x", ("batch", "dim"), tuple(self.x.shape))
        for name in ("z", "x_t", "v_bar"):
            value = getattr(self, name)
            if value.shape != self.x.shape:
                raise ShapeMismatchError(f"batch {name}", tuple(self.x.shape), tuple(value.shape))
        if self.t.shape != (self.x.shape[0],):
            raise ShapeMismatchError("batch t", (self.x.shape[0],), tuple(self.t.shape))
        if self.c is not None and self.c.shape != (self.x.shape[0],):
            raise ShapeMismatchError("batch c", (self.x.shape[0],), tuple(self.c.shape))

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]
