import math
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from app.core.exceptions import CheckpointError, ConfigError
from app.schemas.config import MlpSpec, NormKind

NORM_EPS = 1e-6


def rms_norm(x: Tensor, gain: Tensor, eps: float = NORM_EPS) -> Tensor:
    return gain * x / torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


class RmsNorm(nn.Module):
    def __init__(self, width: int, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(width))

    def forward(self, x: Tensor) -> Tensor:
        return rms_norm(x, self.gain, self.eps)


def sinusoidal_embedding(t: Tensor, dim: int, max_frequency: float) -> Tensor:
    """[sin(π·f·t), cos(π·f·t)] with dim/2 frequencies geometric in [1, max_frequency]."""
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=t.dtype)
    else:
        freqs = torch.exp(torch.linspace(0.0, math.log(max_frequency), half, dtype=t.dtype))
    angles = math.pi * t[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _make_norm(kind: NormKind, width: int) -> nn.Module:
    if kind == NormKind.RMS:
        return RmsNorm(width)
    if kind == NormKind.LAYER:
        return nn.LayerNorm(width, eps=NORM_EPS)
    return nn.Identity()


class HiddenLayer(nn.Module):
    def __init__(self, in_features: int, width: int, norm: NormKind):
        super().__init__()
        self.linear = nn.Linear(in_features, width)
        self.norm = _make_norm(norm, width)


class FlowMlp(nn.Module):
    """MLP over concat(x, raw times, sinusoidal time features, class embedding).

    Times stay in the input as raw scalars next to their embedding so the
    derivative with respect to t flows through both routes.
    """

    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        in_features = spec.in_dim + spec.num_times * (1 + spec.time_embed_dim)
        if spec.num_classes:
            self.class_embed = nn.Embedding(spec.num_classes, spec.class_embed_dim)
            in_features += spec.class_embed_dim
        layers = []
        for width in spec.hidden:
            layers.append(HiddenLayer(in_features, width, spec.norm))
            in_features = width
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(in_features, spec.out_dim)

    def forward(self, x: Tensor, t: Tensor, c: Optional[Tensor] = None) -> Tensor:
        return mlp_apply(self.spec, dict(self.named_parameters()), x, t, c)


def mlp_apply(spec: MlpSpec, tensors: Mapping[str, Tensor], x: Tensor, t: Tensor,
              c: Optional[Tensor] = None) -> Tensor:
    """FlowMlp forward as a pure function of the parameter map.

    Nothing outside `tensors` is read or written, so calls on different
    parameter maps can run from several threads at once.
    """
    if t.dim() == 1:
        t = t[:, None]
    features = [x, t]
    for i in range(spec.num_times):
        features.append(sinusoidal_embedding(t[:, i], spec.time_embed_dim, spec.time_max_frequency))
    if spec.num_classes:
        features.append(F.embedding(c, tensors["class_embed.weight"]))
    h = torch.cat(features, dim=-1)
    for i, width in enumerate(spec.hidden):
        prefix = f"layers.{i}."
        h = F.linear(h, tensors[prefix + "linear.weight"], tensors[prefix + "linear.bias"])
        if spec.norm == NormKind.RMS:
            h = rms_norm(h, tensors[prefix + "norm.gain"])
        elif spec.norm == NormKind.LAYER:
            h = F.layer_norm(h, (width,), tensors[prefix + "norm.weight"], tensors[prefix + "norm.bias"], NORM_EPS)
        h = F.silu(h)
    out = F.linear(h, tensors["head.weight"], tensors["head.bias"])
    if spec.scalar_output:
        out = out.squeeze(-1)
    return out


@lru_cache(maxsize=32)
def build_module(spec: MlpSpec) -> FlowMlp:
    """Module skeleton that fixes parameter names and shapes; evaluation goes through mlp_apply."""
    return FlowMlp(spec).to(torch.float64)


@dataclass
class Parameters:
    spec: MlpSpec
    tensors: "OrderedDict[str, Tensor]"

    def __post_init__(self):
        expected = parameter_shapes(self.spec)
        if list(self.tensors) != list(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            name = sorted(missing or extra)[0] if (missing or extra) else None
            raise CheckpointError("parameter names do not match the network spec", parameter=name)
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise CheckpointError(
                    f"expected shape {shape}, got {tuple(self.tensors[name].shape)}", parameter=name
                )

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def as_dict(self) -> Dict[str, Tensor]:
        return dict(self.tensors)

    def clone(self) -> "Parameters":
        return Parameters(self.spec, OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def replace(self, tensors: Mapping[str, Tensor]) -> "Parameters":
        return Parameters(self.spec, OrderedDict((k, tensors[k]) for k in self.tensors))

    def num_elements(self) -> int:
        return sum(v.numel() for v in self.tensors.values())


def parameter_shapes(spec: MlpSpec) -> "OrderedDict[str, Tuple[int, ...]]":
    module = build_module(spec)
    return OrderedDict((name, tuple(p.shape)) for name, p in module.named_parameters())


@dataclass
class EmaState:
    shadow: Parameters
    decay: float

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError("train.ema_decay", f"decay must lie in [0, 1), got {self.decay}")
