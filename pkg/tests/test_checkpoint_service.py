import json

import pandas as pd
import pytest
import torch
from pydantic import ValidationError

from app.core.exceptions import CheckpointError
from app.schemas.config import Objective, RunConfig
from app.schemas.report import METRICS_COLUMNS, MetricsRow
from app.services import checkpoint_service, network_service


def test_run_config_round_trips(tiny_run_config):
    config = tiny_run_config(objective="cafm")
    assert RunConfig.model_validate_json(config.model_dump_json()) == config


def test_missing_dataset_names_the_field(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"train": {"objective": "fm"}}))
    with pytest.raises(ValidationError) as info:
        checkpoint_service.load_run_config(path)
    assert ("train", "dataset") in [error["loc"] for error in info.value.errors()]


def make_checkpoint(config, small_g_spec):
    g = network_service.init(small_g_spec, 3, zero_head=False)
    ema = network_service.ema_init(g, 0.99)
    return checkpoint_service.build_checkpoint(
        config, Objective.FM, 5, generator=g, ema=ema, rng_state={"data": [1, 2, 3]}, counters={"g": 5}
    )


def test_save_load_save_is_byte_identical(tmp_path, tiny_run_config, small_g_spec):
    checkpoint = make_checkpoint(tiny_run_config(), small_g_spec)
    first = tmp_path / "a.json"
    second = tmp_path / "b.json"
    checkpoint_service.save_checkpoint(first, checkpoint)
    checkpoint_service.save_checkpoint(second, checkpoint_service.load_checkpoint(first))
    assert first.read_bytes() == second.read_bytes()


def test_loaded_parameters_match(tmp_path, tiny_run_config, small_g_spec):
    checkpoint = make_checkpoint(tiny_run_config(), small_g_spec)
    path = tmp_path / "ckpt.json"
    checkpoint_service.save_checkpoint(path, checkpoint)
    params = checkpoint_service.evaluation_generator(checkpoint_service.load_checkpoint(path))
    original = network_service.init(small_g_spec, 3, zero_head=False)
    assert all(torch.equal(params[name], original[name]) for name in original)


def test_config_hash_mismatch_is_rejected(tmp_path, tiny_run_config, small_g_spec):
    checkpoint = make_checkpoint(tiny_run_config(), small_g_spec)
    path = tmp_path / "ckpt.json"
    data = json.loads(checkpoint_service.serialize_checkpoint(checkpoint))
    data["config"]["train"]["seed"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(CheckpointError):
        checkpoint_service.load_checkpoint(path)


def test_shape_mismatch_names_parameter(tiny_run_config, small_g_spec):
    checkpoint = make_checkpoint(tiny_run_config(), small_g_spec)
    arrays = dict(checkpoint.generator)
    arrays["head.bias"] = checkpoint_service.to_arrays({"x": torch.zeros(3)})["x"]
    with pytest.raises(CheckpointError) as info:
        checkpoint_service.to_parameters(small_g_spec, arrays, "generator")
    assert info.value.parameter == "head.bias"


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_service.load_checkpoint(tmp_path / "nope.json")


def test_metrics_writer_fixed_schema_with_empty_cells(tmp_path):
    writer = checkpoint_service.MetricsWriter(tmp_path / "metrics.csv")
    writer.write(MetricsRow(step=1, phase="fm", loss_g=0.5))
    writer.write(MetricsRow(step=2, phase="fm", loss_g=0.25, field_rel_mse=0.1))
    frame = pd.read_csv(tmp_path / "metrics.csv")
    assert list(frame.columns) == METRICS_COLUMNS
    assert len(frame) == 2
    assert pd.isna(frame.loc[0, "loss_d_adv"])
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRICS_COLUMNS)


def test_save_samples_with_zero_rows_writes_header(tmp_path):
    path = tmp_path / "samples.csv"
    checkpoint_service.save_samples(path, torch.zeros(0, 2))
    assert path.read_text().strip() == "x1,x2"


def test_oracle_checkpoint_has_no_parameters(tiny_run_config):
    checkpoint = checkpoint_service.oracle_checkpoint(tiny_run_config())
    assert checkpoint.objective == Objective.ORACLE
    assert checkpoint.generator is None


def test_unknown_format_version_is_rejected(tmp_path, tiny_run_config, small_g_spec):
    checkpoint = make_checkpoint(tiny_run_config(), small_g_spec)
    path = tmp_path / "ckpt.json"
    data = json.loads(checkpoint_service.serialize_checkpoint(checkpoint))
    data["format_version"] = 999
    path.write_text(json.dumps(data))
    with pytest.raises(CheckpointError):
        checkpoint_service.load_checkpoint(path)
