"""Checkpoints, run configs, metrics CSV and report/sample files."""
import hashlib
import json
import logging
import os
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import pandas as pd
import torch
from pydantic import BaseModel

from app.core.config import settings
from app.core.exceptions import CheckpointError
from app.models.network import EmaState, Parameters
from app.schemas.checkpoint import Checkpoint, NamedArray, OptimizerMoments
from app.schemas.config import MlpSpec, Objective, RunConfig
from app.schemas.report import METRICS_COLUMNS, MetricsRow

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_run_config(path: PathLike) -> RunConfig:
    """Parse and validate a RunConfig JSON file (raises pydantic ValidationError)."""
    return RunConfig.model_validate_json(Path(path).read_text())


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(config.model_dump_json().encode()).hexdigest()


def output_dir(config: RunConfig, override: Optional[PathLike] = None) -> Path:
    if override is not None:
        path = Path(override)
    elif config.output_dir:
        path = Path(config.output_dir)
    else:
        path = Path(settings.OUTPUT_DIR) / config.name
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_atomic(path: PathLike, text: str) -> None:
    """Write-then-rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_json(path: PathLike, model: BaseModel) -> None:
    write_atomic(path, model.model_dump_json(indent=2))


# Parameter arrays

def to_arrays(tensors: Mapping[str, torch.Tensor]) -> Dict[str, NamedArray]:
    return {
        name: NamedArray(shape=list(value.shape), data=value.detach().reshape(-1).tolist())
        for name, value in tensors.items()
    }


def to_tensors(arrays: Mapping[str, NamedArray]) -> "OrderedDict[str, torch.Tensor]":
    tensors = OrderedDict()
    for name, array in arrays.items():
        expected = 1
        for extent in array.shape:
            expected *= extent
        if expected != len(array.data):
            raise CheckpointError(f"shape {array.shape} does not match {len(array.data)} values", parameter=name)
        tensors[name] = torch.tensor(array.data, dtype=torch.float64).reshape(array.shape)
    return tensors


def to_parameters(spec: Optional[MlpSpec], arrays: Optional[Mapping[str, NamedArray]], what: str) -> Parameters:
    if spec is None or arrays is None:
        raise CheckpointError(f"checkpoint has no {what} parameters")
    return Parameters(spec, to_tensors(arrays))


def moments_to_schema(moments: Optional[Dict]) -> Optional[OptimizerMoments]:
    if moments is None:
        return None
    return OptimizerMoments(
        step=moments["step"],
        exp_avg=to_arrays(moments["exp_avg"]),
        exp_avg_sq=to_arrays(moments["exp_avg_sq"]),
    )


def moments_from_schema(moments: Optional[OptimizerMoments]) -> Optional[Dict]:
    if moments is None:
        return None
    return {
        "step": moments.step,
        "exp_avg": to_tensors(moments.exp_avg),
        "exp_avg_sq": to_tensors(moments.exp_avg_sq),
    }


# Checkpoints

def build_checkpoint(
    config: RunConfig,
    objective: Objective,
    step: int,
    generator: Optional[Parameters] = None,
    discriminator: Optional[Parameters] = None,
    ema: Optional[EmaState] = None,
    optimizer_g: Optional[Dict] = None,
    optimizer_d: Optional[Dict] = None,
    rng_state: Optional[Dict[str, List[int]]] = None,
    counters: Optional[Dict[str, int]] = None,
) -> Checkpoint:
    return Checkpoint(
        format_version=settings.CHECKPOINT_FORMAT_VERSION,
        objective=objective,
        step=step,
        config=config,
        config_hash=config_hash(config),
        generator_spec=generator.spec if generator else None,
        generator=to_arrays(generator.tensors) if generator else None,
        discriminator_spec=discriminator.spec if discriminator else None,
        discriminator=to_arrays(discriminator.tensors) if discriminator else None,
        ema=to_arrays(ema.shadow.tensors) if ema else None,
        optimizer_g=moments_to_schema(optimizer_g),
        optimizer_d=moments_to_schema(optimizer_d),
        rng_state=rng_state or {},
        counters=counters or {},
    )


def oracle_checkpoint(config: RunConfig) -> Checkpoint:
    """A parameter-free checkpoint whose field is the analytic marginal velocity."""
    return build_checkpoint(config, Objective.ORACLE, step=0)


def serialize_checkpoint(checkpoint: Checkpoint) -> str:
    return checkpoint.model_dump_json()


def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> None:
    write_atomic(path, serialize_checkpoint(checkpoint))
    logger.info(f"Saved {checkpoint.objective.value} checkpoint at step {checkpoint.step} to {path}")


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    try:
        checkpoint = Checkpoint.model_validate_json(path.read_text())
    except ValueError as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}")
    if checkpoint.format_version != settings.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"format version {checkpoint.format_version} is not {settings.CHECKPOINT_FORMAT_VERSION}"
        )
    if config_hash(checkpoint.config) != checkpoint.config_hash:
        raise CheckpointError("config echo does not match its recorded hash")
    return checkpoint


def evaluation_generator(checkpoint: Checkpoint) -> Parameters:
    """EMA weights when present, raw generator weights otherwise."""
    arrays = checkpoint.ema if checkpoint.ema is not None else checkpoint.generator
    return to_parameters(checkpoint.generator_spec, arrays, "generator")


# CSV files

class MetricsWriter:
    """Append-only metrics CSV with the fixed column schema."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self.path.unlink()
        self._header_written = False

    def write(self, row: MetricsRow) -> None:
        frame = pd.DataFrame([row.model_dump()], columns=METRICS_COLUMNS)
        frame.to_csv(self.path, mode="a", header=not self._header_written, index=False, na_rep="")
        self._header_written = True

    def read(self) -> pd.DataFrame:
        return pd.read_csv(self.path)


def save_samples(path: PathLike, samples: torch.Tensor, classes: Optional[torch.Tensor] = None) -> None:
    columns = {f"x{d + 1}": samples[:, d].numpy() for d in range(samples.shape[1])}
    if classes is not None:
        columns["class"] = classes.numpy()
    frame = pd.DataFrame(columns, columns=list(columns))
    write_atomic(path, frame.to_csv(index=False))


def save_frame(path: PathLike, frame: pd.DataFrame) -> None:
    write_atomic(path, frame.to_csv(index=False))


def read_json(path: PathLike) -> Dict:
    return json.loads(Path(path).read_text())
