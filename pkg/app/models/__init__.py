from .flow_path import FlowPath, LINEAR_PATH, TrainingBatch
from .mixture import GaussianMixture, PRESETS, get_preset
from .network import EmaState, FlowMlp, Parameters, RmsNorm, build_module

__all__ = [
    "FlowPath",
    "LINEAR_PATH",
    "TrainingBatch",
    "GaussianMixture",
    "PRESETS",
    "get_preset",
    "EmaState",
    "FlowMlp",
    "Parameters",
    "RmsNorm",
    "build_module",
]
