from .config import (
    ContrastiveKind, GridSpec, LossWeights, MlpSpec, NetworkConfig, NormKind, Objective,
    RunConfig, SamplerConfig, SamplerKind, Schedules, TimeSampler, TimeSamplerKind, TrainConfig
)
from .report import (
    CfgSweepEntry, EquilibriumReport, EvalReport, FieldErrorReport, METRICS_COLUMNS,
    MetricsRow, PerTimeError, SampleDistanceReport
)
from .checkpoint import Checkpoint, NamedArray, OptimizerMoments

__all__ = [
    "ContrastiveKind", "GridSpec", "LossWeights", "MlpSpec", "NetworkConfig", "NormKind", "Objective",
    "RunConfig", "SamplerConfig", "SamplerKind", "Schedules", "TimeSampler", "TimeSamplerKind", "TrainConfig",
    "CfgSweepEntry", "EquilibriumReport", "EvalReport", "FieldErrorReport", "METRICS_COLUMNS",
    "MetricsRow", "PerTimeError", "SampleDistanceReport",
    "Checkpoint", "NamedArray", "OptimizerMoments",
]
