import enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


class Objective(str, enum.Enum):
    FM = "fm"
    CAFM = "cafm"
    AFM = "afm"
    ORACLE = "oracle"


class NormKind(str, enum.Enum):
    RMS = "rms"
    LAYER = "layer"
    NONE = "none"


class TimeSamplerKind(str, enum.Enum):
    UNIFORM = "uniform"
    LOGIT_NORMAL = "logit-normal"


class SamplerKind(str, enum.Enum):
    EULER = "euler"
    HEUN = "heun"
    SDE = "sde"


class ContrastiveKind(str, enum.Enum):
    LS = "ls"
    NS = "ns"
    HINGE = "hinge"


class MlpSpec(BaseModel):
    """Fully resolved network shape; hashable so built modules can be cached."""
    in_dim: int = Field(ge=1)
    hidden: Tuple[int, ...]
    norm: NormKind = NormKind.RMS
    time_embed_dim: int = 64
    time_max_frequency: float = 16.0
    num_classes: int = 0  # includes the null class; 0 = unconditional
    class_embed_dim: int = 32
    out_dim: int
    num_times: int = 1  # 2 for the (s, t) discrete AFM generator
    scalar_output: bool = False  # discriminators return one value per row

    class Config:
        frozen = True

    @model_validator(mode="after")
    def check_shape(self):
        if self.out_dim not in (self.in_dim, 1):
            raise ValueError(f"out_dim must be in_dim ({self.in_dim}) or 1, got {self.out_dim}")
        if self.time_embed_dim <= 0 or self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even and positive, got {self.time_embed_dim}")
        if any(width < 1 for width in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.num_classes == 1:
            raise ValueError("num_classes counts the null class, so it is 0 or at least 2")
        if self.num_times not in (1, 2):
            raise ValueError(f"num_times must be 1 or 2, got {self.num_times}")
        if self.scalar_output and self.out_dim != 1:
            raise ValueError("scalar_output requires out_dim 1")
        return self


class NetworkConfig(BaseModel):
    hidden: List[int] = [256, 256, 256]
    norm: NormKind = NormKind.RMS
    time_embed_dim: int = 64
    time_max_frequency: float = 16.0
    class_embed_dim: int = 32

    def to_spec(self, in_dim: int, out_dim: int, num_classes: int = 0, num_times: int = 1,
                scalar_output: bool = False) -> MlpSpec:
        return MlpSpec(
            in_dim=in_dim,
            hidden=tuple(self.hidden),
            norm=self.norm,
            time_embed_dim=self.time_embed_dim,
            time_max_frequency=self.time_max_frequency,
            num_classes=num_classes,
            class_embed_dim=self.class_embed_dim,
            out_dim=out_dim,
            num_times=num_times,
            scalar_output=scalar_output,
        )


class TimeSampler(BaseModel):
    kind: TimeSamplerKind = TimeSamplerKind.UNIFORM
    mu: float = 0.8
    sigma: float = Field(default=0.8, gt=0)
    t_min: float = 0.0
    t_max: float = 1.0

    @model_validator(mode="after")
    def check_range(self):
        if not 0.0 <= self.t_min < 1.0:
            raise ValueError(f"t_min must lie in [0, 1), got {self.t_min}")
        if not self.t_min < self.t_max <= 1.0:
            raise ValueError(f"t_max must lie in (t_min, 1], got {self.t_max}")
        return self


class LossWeights(BaseModel):
    lambda_cp: float = Field(default=0.001, ge=0)
    lambda_ot: float = Field(default=0.0, ge=0)
    lambda_gp: float = Field(default=1.0, ge=0)  # AFM only


class FloatScheduleEntry(BaseModel):
    step: int = Field(ge=0)
    value: float = Field(ge=0)


class IntScheduleEntry(BaseModel):
    step: int = Field(ge=0)
    value: int = Field(ge=1)


class Schedules(BaseModel):
    """Piecewise-constant overrides keyed by optimizer-update count.

    An entry applies from its step onwards until the next entry.
    """
    lambda_ot: List[FloatScheduleEntry] = []
    n_disc: List[IntScheduleEntry] = []

    @model_validator(mode="after")
    def check_sorted(self):
        for name in ("lambda_ot", "n_disc"):
            steps = [entry.step for entry in getattr(self, name)]
            if steps != sorted(steps) or len(set(steps)) != len(steps):
                raise ValueError(f"{name} schedule steps must be strictly increasing")
        return self

    @staticmethod
    def value_at(entries, step: int, default):
        value = default
        for entry in entries:
            if entry.step > step:
                break
            value = entry.value
        return value

    def lambda_ot_at(self, step: int, default: float) -> float:
        return self.value_at(self.lambda_ot, step, default)

    def n_disc_at(self, step: int, default: int) -> int:
        return self.value_at(self.n_disc, step, default)


class SamplerConfig(BaseModel):
    kind: SamplerKind = SamplerKind.EULER
    steps: int = Field(default=128, ge=1)
    t_start: float = 1.0
    t_end: float = 0.0
    sde_t_floor: float = Field(default=1e-3, gt=0, lt=1)
    sde_diffusion_scale: float = Field(default=1.0, ge=0)
    cfg_scale: Optional[float] = Field(default=None, ge=0)
    cfg_interval: Tuple[float, float] = (0.0, 0.9)

    @model_validator(mode="after")
    def check_interval(self):
        lo, hi = self.cfg_interval
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"cfg_interval must satisfy 0 <= lo <= hi <= 1, got {self.cfg_interval}")
        if not 0.0 <= self.t_end < self.t_start <= 1.0:
            raise ValueError("sampling runs from t_start down to t_end inside [0, 1]")
        return self


class TrainConfig(BaseModel):
    """Training hyperparameters. Defaults are the CAFM post-training recipe."""
    objective: Objective = Objective.CAFM
    dataset: str
    g_lr: float = Field(default=1e-5, gt=0)
    d_lr: float = Field(default=1e-5, gt=0)
    adam_beta: Tuple[float, float] = (0.0, 0.95)
    adam_eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    batch: int = Field(default=256, ge=1)
    total_steps: int = Field(default=20000, ge=1)
    d_warmup_steps: int = Field(default=0, ge=0)
    n_disc: int = Field(default=16, ge=1)
    weights: LossWeights = LossWeights()
    ema_decay: float = Field(default=0.99, ge=0, lt=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    schedules: Schedules = Schedules()
    cfg_dropout: float = Field(default=0.1, ge=0, le=1)
    contrastive: ContrastiveKind = ContrastiveKind.LS
    time_sampler: TimeSampler = TimeSampler()
    t_dot: float = 1.0
    afm_min_gap: float = Field(default=0.05, gt=0, lt=1)
    generator: NetworkConfig = NetworkConfig()
    discriminator: NetworkConfig = NetworkConfig()

    @model_validator(mode="after")
    def check_beta(self):
        b1, b2 = self.adam_beta
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"adam_beta entries must lie in [0, 1), got {self.adam_beta}")
        return self


class GridSpec(BaseModel):
    """Uniform evaluation grid for field dumps (per axis) at a list of times."""
    points: int = Field(default=64, ge=2)
    lo: float = -6.0
    hi: float = 6.0
    times: List[float] = [0.1, 0.25, 0.5, 0.75, 0.9]

    @model_validator(mode="after")
    def check_bounds(self):
        if self.lo >= self.hi:
            raise ValueError("grid lo must be below hi")
        if any(not 0.0 <= t <= 1.0 for t in self.times):
            raise ValueError("grid times must lie in [0, 1]")
        return self


class RunConfig(BaseModel):
    name: str = "run"
    train: TrainConfig
    sampler: SamplerConfig = SamplerConfig()
    eval_every: int = Field(default=1000, ge=1)
    eval_samples: int = Field(default=2000, ge=1)
    eval_t_draws: int = Field(default=16, ge=1)
    eval_x_per_t: int = Field(default=128, ge=1)
    grid: GridSpec = GridSpec()
    output_dir: Optional[str] = None
    init_checkpoint: Optional[str] = None
    checkpoint_every: int = Field(default=0, ge=0)  # 0 = final checkpoint only
