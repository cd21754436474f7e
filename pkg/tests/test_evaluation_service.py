import pytest
import torch

from app.core.exceptions import DomainError
from app.models.mixture import get_preset
from app.models.network import Parameters
from app.schemas.config import GridSpec, MlpSpec, SamplerConfig
from app.services import evaluation_service, network_service, oracle_service


def test_field_rel_mse_oracle_is_zero_and_zero_field_is_one(ring8, rng):
    oracle = oracle_service.oracle_field(ring8)
    report = evaluation_service.field_rel_mse(oracle, ring8, 4, 32, rng)
    assert report.relative_mse == 0.0
    assert len(report.per_t) == 4

    zero = evaluation_service.field_rel_mse(lambda x, t, c=None: torch.zeros_like(x), ring8, 4, 32, rng)
    assert zero.relative_mse == pytest.approx(1.0)


def test_field_rel_mse_deterministic_in_seed(ring8):
    oracle = oracle_service.oracle_field(ring8)
    a = evaluation_service.field_rel_mse(lambda x, t, c=None: 0.9 * oracle(x, t), ring8, 4, 16,
                                         torch.Generator().manual_seed(2))
    b = evaluation_service.field_rel_mse(lambda x, t, c=None: 0.9 * oracle(x, t), ring8, 4, 16,
                                         torch.Generator().manual_seed(2))
    assert a == b


def test_energy_distance_identical_sets(rng):
    a = torch.randn(200, 2, generator=rng)
    assert evaluation_service.energy_distance(a, a) <= 1e-12


def test_energy_distance_baselines(rng):
    a = torch.randn(3000, 2, generator=rng)
    b = torch.randn(3000, 2, generator=rng)
    assert evaluation_service.energy_distance(a, b) <= 0.01
    shifted = b + torch.tensor([2.0, 0.0])
    assert evaluation_service.energy_distance(a, shifted) >= 0.5


def test_energy_distance_symmetric_and_non_negative(rng):
    a = torch.randn(50, 3, generator=rng)
    b = torch.randn(70, 3, generator=rng) * 2
    ab = evaluation_service.energy_distance(a, b)
    assert ab >= 0.0
    assert ab == pytest.approx(evaluation_service.energy_distance(b, a), rel=1e-12)


def test_energy_distance_rejects_empty():
    with pytest.raises(DomainError):
        evaluation_service.energy_distance(torch.zeros(0, 2), torch.zeros(3, 2))


def test_sample_distance_report(rng):
    a = torch.randn(500, 2, generator=rng)
    report = evaluation_service.sample_distance(a, a.clone(), rng)
    assert report.sliced_wasserstein == pytest.approx(0.0, abs=1e-12)
    assert report.mean_gap == 0.0


def linear_discriminator() -> Parameters:
    spec = MlpSpec(in_dim=1, hidden=(), norm="none", time_embed_dim=2, out_dim=1, scalar_output=True)
    params = network_service.init(spec, 0)
    tensors = params.tensors
    head = torch.zeros_like(tensors["head.weight"])
    head[0, 0] = 3.0  # x column
    head[0, 1] = 2.0  # raw t column
    tensors["head.weight"] = head
    return Parameters(spec, tensors)


def test_path_consistency_exact_for_linear_d(rng):
    d = linear_discriminator()
    x0 = torch.randn(4, 1, generator=rng)
    x1 = torch.randn(4, 1, generator=rng)
    ts, xs, vs = evaluation_service.straight_path(x0, x1, 256)
    assert evaluation_service.path_consistency(d, ts, xs, vs) <= 1e-12


def test_path_consistency_random_mlp(random_d, rng):
    x0 = torch.randn(4, 2, generator=rng)
    x1 = torch.randn(4, 2, generator=rng)
    ts, xs, vs = evaluation_service.straight_path(x0, x1, 1024)
    assert evaluation_service.path_consistency(random_d, ts, xs, vs) <= 1e-3


def test_path_consistency_needs_fine_grid(random_d):
    ts, xs, vs = evaluation_service.straight_path(torch.zeros(1, 2), torch.ones(1, 2), 64)
    with pytest.raises(DomainError):
        evaluation_service.path_consistency(random_d, ts, xs, vs)


def test_equilibrium_report_zero_d(small_d_spec, ring8, rng):
    d = network_service.init(small_d_spec, rng)
    report = evaluation_service.equilibrium_report(d, oracle_service.oracle_field(ring8), ring8, 64, rng)
    assert (report.real_logit_mean, report.fake_logit_mean, report.d_value_mean) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("order", [1, 2])
def test_convergence_slope_on_exact_power_laws(order):
    errors = [(n, (1.0 / n) ** order) for n in (8, 16, 32, 64)]
    assert evaluation_service.convergence_slope(errors) == pytest.approx(order, abs=1e-6)


def test_convergence_slope_rejects_degenerate_input():
    with pytest.raises(DomainError):
        evaluation_service.convergence_slope([(8, 0.1), (8, 0.2), (8, 0.3)])
    with pytest.raises(DomainError):
        evaluation_service.convergence_slope([(8, 0.1), (16, 0.05)])


def test_field_grid_dump_rows_and_columns(ring8):
    grid = GridSpec(points=5, times=[0.25, 0.75])
    frame = evaluation_service.field_grid_dump(oracle_service.oracle_field(ring8), ring8, grid)
    assert len(frame) == 5 * 5 * 2
    assert list(frame.columns) == ["x1", "x2", "t", "model_v1", "model_v2", "oracle_v1", "oracle_v2"]
    assert (frame["model_v1"] == frame["oracle_v1"]).all()


def test_cfg_sweep_with_oracle_field():
    gm = get_preset("ring8-cond")
    entries = evaluation_service.cfg_sweep(
        oracle_service.oracle_field(gm), gm, [1.0], SamplerConfig(steps=32), 64, torch.Generator().manual_seed(0)
    )
    assert len(entries) == 1
    assert set(entries[0].per_class) == set(range(8))
    assert entries[0].energy_distance < 0.2
