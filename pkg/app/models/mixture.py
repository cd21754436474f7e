import math
from dataclasses import dataclass
from typing import Callable, Dict, List

import torch
from torch import Tensor

from app.core.exceptions import ConfigError, ShapeMismatchError


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture; component k has covariance stds[k]²·I.

    With `conditional=True` every component is its own class, so class k
    selects component k and a reserved null class (index K) means "any".
    """
    name: str
    weights: Tensor
    means: Tensor
    stds: Tensor
    conditional: bool = False

    def __post_init__(self):
        if self.means.dim() != 2:
            raise ShapeMismatchError("mixture means", ("K", "dim"), tuple(self.means.shape))
        k = self.means.shape[0]
        if self.weights.shape != (k,):
            raise ShapeMismatchError("mixture weights", (k,), tuple(self.weights.shape))
        if self.stds.shape != (k,):
            raise ShapeMismatchError("mixture stds", (k,), tuple(self.stds.shape))
        if bool((self.weights < 0).any()) or abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ConfigError("dataset.weights", "weights must be non-negative and sum to 1")
        if bool((self.stds <= 0).any()):
            raise ConfigError("dataset.stds", "standard deviations must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def num_classes(self) -> int:
        """Class count including the null class; 0 for unconditional mixtures."""
        return self.num_components + 1 if self.conditional else 0

    @property
    def null_class(self) -> int:
        return self.num_components

    @property
    def mean(self) -> Tensor:
        return self.weights @ self.means

    @property
    def covariance(self) -> Tensor:
        # Law of total covariance over the components
        centered = self.means - self.mean
        between = centered.T @ (self.weights[:, None] * centered)
        within = float(self.weights @ self.stds.pow(2)) * torch.eye(self.dim, dtype=self.means.dtype)
        return between + within

    def component(self, k: int) -> "GaussianMixture":
        """The single-component mixture for class k."""
        return GaussianMixture(
            name=f"{self.name}[{k}]",
            weights=torch.ones(1, dtype=self.weights.dtype),
            means=self.means[k:k + 1].clone(),
            stds=self.stds[k:k + 1].clone(),
        )


def _gm1d2() -> GaussianMixture:
    return GaussianMixture(
        name="gm1d2",
        weights=torch.tensor([0.5, 0.5], dtype=torch.float64),
        means=torch.tensor([[-2.0], [2.0]], dtype=torch.float64),
        stds=torch.tensor([0.5, 0.5], dtype=torch.float64),
    )


def _ring(name: str, count: int = 8, radius: float = 4.0, std: float = 0.3,
          conditional: bool = False) -> GaussianMixture:
    angles = torch.arange(count, dtype=torch.float64) * (2.0 * math.pi / count)
    means = radius * torch.stack([torch.cos(angles), torch.sin(angles)], dim=1)
    return GaussianMixture(
        name=name,
        weights=torch.full((count,), 1.0 / count, dtype=torch.float64),
        means=means,
        stds=torch.full((count,), std, dtype=torch.float64),
        conditional=conditional,
    )


def _normal(dim: int) -> GaussianMixture:
    return GaussianMixture(
        name=f"normal{dim}d",
        weights=torch.ones(1, dtype=torch.float64),
        means=torch.zeros(1, dim, dtype=torch.float64),
        stds=torch.ones(1, dtype=torch.float64),
    )


PRESETS: Dict[str, Callable[[], GaussianMixture]] = {
    "gm1d2": _gm1d2,
    "ring8": lambda: _ring("ring8"),
    "ring8-cond": lambda: _ring("ring8-cond", conditional=True),
    "normal1d": lambda: _normal(1),
    "normal2d": lambda: _normal(2),
}


def preset_names() -> List[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> GaussianMixture:
    if name not in PRESETS:
        raise ConfigError("dataset", f"unknown preset '{name}' (choose from {', '.join(preset_names())})")
    return PRESETS[name]()
