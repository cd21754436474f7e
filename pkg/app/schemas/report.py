from pydantic import BaseModel
from typing import Optional, List, Dict

METRICS_COLUMNS = [
    "step",
    "phase",
    "loss_g",
    "loss_d_adv",
    "loss_d_cp",
    "loss_g_adv",
    "loss_g_ot",
    "d_logit_real_mean",
    "d_logit_fake_mean",
    "grad_norm_g",
    "grad_norm_d",
    "field_rel_mse",
    "energy_distance",
]


class PerTimeError(BaseModel):
    t: float
    relative_mse: float


class FieldErrorReport(BaseModel):
    n_points: int
    relative_mse: float
    per_t: List[PerTimeError] = []


class SampleDistanceReport(BaseModel):
    energy_distance: float
    sliced_wasserstein: float
    mean_gap: float
    cov_gap: float


class EquilibriumReport(BaseModel):
    real_logit_mean: float
    fake_logit_mean: float
    d_value_mean: float


class CfgSweepEntry(BaseModel):
    cfg_scale: float
    energy_distance: float
    per_class: Dict[int, float] = {}


class EvalReport(BaseModel):
    checkpoint: str
    preset: str
    field: Optional[FieldErrorReport] = None  # None for discrete-time (AFM) checkpoints
    samples: SampleDistanceReport
    equilibrium: Optional[EquilibriumReport] = None
    cfg_sweep: List[CfgSweepEntry] = []


class MetricsRow(BaseModel):
    """One metrics CSV row; None serializes as an empty cell."""
    step: int
    phase: str
    loss_g: Optional[float] = None
    loss_d_adv: Optional[float] = None
    loss_d_cp: Optional[float] = None
    loss_g_adv: Optional[float] = None
    loss_g_ot: Optional[float] = None
    d_logit_real_mean: Optional[float] = None
    d_logit_fake_mean: Optional[float] = None
    grad_norm_g: Optional[float] = None
    grad_norm_d: Optional[float] = None
    field_rel_mse: Optional[float] = None
    energy_distance: Optional[float] = None
