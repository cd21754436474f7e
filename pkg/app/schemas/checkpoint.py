from pydantic import BaseModel
from typing import Optional, List, Dict

from app.schemas.config import MlpSpec, Objective, RunConfig


class NamedArray(BaseModel):
    shape: List[int]
    data: List[float]


class OptimizerMoments(BaseModel):
    step: int = 0
    exp_avg: Dict[str, NamedArray] = {}
    exp_avg_sq: Dict[str, NamedArray] = {}


class Checkpoint(BaseModel):
    """JSON manifest of a training run at a given optimizer-update count."""
    format_version: int
    objective: Objective
    step: int
    config: RunConfig
    config_hash: str
    generator_spec: Optional[MlpSpec] = None
    generator: Optional[Dict[str, NamedArray]] = None
    discriminator_spec: Optional[MlpSpec] = None
    discriminator: Optional[Dict[str, NamedArray]] = None
    ema: Optional[Dict[str, NamedArray]] = None
    optimizer_g: Optional[OptimizerMoments] = None
    optimizer_d: Optional[OptimizerMoments] = None
    rng_state: Dict[str, List[int]] = {}
    counters: Dict[str, int] = {}
