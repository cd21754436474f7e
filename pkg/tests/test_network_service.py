from concurrent.futures import ThreadPoolExecutor

import pytest
import torch

from app.core.exceptions import CheckpointError, ConfigError, DomainError
from app.models.network import EmaState, FlowMlp, Parameters, RmsNorm, parameter_shapes, rms_norm
from app.schemas.config import MlpSpec
from app.services import network_service


def test_zero_head_initialization_gives_zero_output(small_d_spec, rng):
    d = network_service.init(small_d_spec, rng)
    out = network_service.d_forward(d, torch.randn(8, 2, generator=rng), 0.3)
    assert out.shape == (8,)
    assert bool((out == 0).all())


def test_init_is_deterministic(small_g_spec):
    a = network_service.init(small_g_spec, 7, zero_head=False)
    b = network_service.init(small_g_spec, 7, zero_head=False)
    assert all(torch.equal(a[name], b[name]) for name in a)


def test_generator_output_shape(small_g_spec, rng):
    g = network_service.init(small_g_spec, rng, zero_head=False)
    v = network_service.g_forward(g, torch.randn(5, 2, generator=rng), torch.rand(5, generator=rng))
    assert v.shape == (5, 2)


def test_rms_norm_unit_gain():
    x = torch.tensor([[3.0, 4.0]])
    out = rms_norm(x, torch.ones(2))
    assert float(out.pow(2).mean()) == pytest.approx(1.0, rel=1e-5)


def test_d_jvp_matches_finite_differences(random_d, rng):
    x = torch.randn(6, 2, generator=rng)
    t = torch.rand(6, generator=rng)
    x_dot = torch.randn(6, 2, generator=rng)
    value, tangent = network_service.d_jvp(random_d, x, t, x_dot, 1.0)
    h = 1e-5
    plus = network_service.d_forward(random_d, x + h * x_dot, t + h)
    minus = network_service.d_forward(random_d, x - h * x_dot, t - h)
    assert torch.allclose(tangent, (plus - minus) / (2 * h), atol=1e-7)
    assert torch.equal(value, network_service.d_forward(random_d, x, t))


def test_d_jvp_pair_matches_two_single_jvps(random_d, rng):
    x = torch.randn(6, 2, generator=rng)
    t = torch.rand(6, generator=rng)
    real = torch.randn(6, 2, generator=rng)
    fake = torch.randn(6, 2, generator=rng)
    value, jvp_real, jvp_fake = network_service.d_jvp_pair(random_d, x, t, real, fake)
    _, single_real = network_service.d_jvp(random_d, x, t, real)
    _, single_fake = network_service.d_jvp(random_d, x, t, fake)
    assert torch.allclose(jvp_real, single_real, atol=1e-12)
    assert torch.allclose(jvp_fake, single_fake, atol=1e-12)


def test_conditional_network_defaults_to_null_class(rng):
    spec = MlpSpec(in_dim=2, hidden=(8,), time_embed_dim=4, out_dim=2, num_classes=9, class_embed_dim=4)
    g = network_service.init(spec, rng, zero_head=False)
    x = torch.randn(3, 2, generator=rng)
    assert torch.equal(
        network_service.g_forward(g, x, 0.5), network_service.g_forward(g, x, 0.5, torch.full((3,), 8))
    )
    with pytest.raises(DomainError):
        network_service.g_forward(g, x, 0.5, torch.full((3,), 9))


def test_unconditional_network_rejects_labels(small_g_spec, rng):
    g = network_service.init(small_g_spec, rng)
    with pytest.raises(DomainError):
        network_service.g_forward(g, torch.zeros(2, 2), 0.5, torch.zeros(2, dtype=torch.long))


def test_parameters_reject_wrong_shape(small_g_spec):
    shapes = parameter_shapes(small_g_spec)
    tensors = network_service.init(small_g_spec, 0).tensors
    name = next(iter(shapes))
    tensors[name] = torch.zeros(1)
    with pytest.raises(CheckpointError) as info:
        Parameters(small_g_spec, tensors)
    assert info.value.parameter == name


def test_ema_recursion_matches_unrolled(small_g_spec, rng):
    params = network_service.init(small_g_spec, rng, zero_head=False)
    ema = network_service.ema_init(params, 0.9)
    shadow = params["head.weight"].clone()
    for _ in range(5):
        params = params.replace({k: v + torch.randn(v.shape, generator=rng) for k, v in params.items()})
        ema = network_service.ema_update(ema, params)
        shadow = 0.9 * shadow + 0.1 * params["head.weight"]
    assert torch.allclose(ema.shadow["head.weight"], shadow, atol=1e-12, rtol=0)


def test_ema_decay_validated(small_g_spec):
    params = network_service.init(small_g_spec, 0)
    with pytest.raises(ConfigError):
        EmaState(shadow=params, decay=1.0)


def test_concurrent_forward_on_distinct_parameters(small_d_spec, rng):
    snapshots = [network_service.init(small_d_spec, seed, zero_head=False) for seed in range(4)]
    x = torch.randn(32, 2, generator=rng)
    t = torch.rand(32, generator=rng)
    expected = [network_service.d_forward(params, x, t) for params in snapshots]

    def mismatches(index):
        params = snapshots[index]
        bad = 0
        for _ in range(200):
            if not torch.equal(network_service.d_forward(params, x, t), expected[index]):
                bad += 1
            _, tangent = network_service.d_jvp(params, x, t, x)
            if not torch.isfinite(tangent).all():
                bad += 1
        return bad

    with ThreadPoolExecutor(max_workers=4) as pool:
        assert list(pool.map(mismatches, range(4))) == [0, 0, 0, 0]


@pytest.mark.parametrize("norm", ["rms", "layer", "none"])
def test_module_forward_matches_parameter_map(norm, rng):
    spec = MlpSpec(in_dim=2, hidden=(8, 8), norm=norm, time_embed_dim=4, out_dim=2, num_classes=3,
                   class_embed_dim=4)
    params = network_service.init(spec, rng, zero_head=False)
    module = FlowMlp(spec).to(torch.float64)
    module.load_state_dict(params.tensors)
    x = torch.randn(5, 2, generator=rng)
    t = torch.rand(5, generator=rng)
    c = torch.tensor([0, 1, 2, 0, 1])
    with torch.no_grad():
        assert torch.equal(module(x, t, c), network_service.g_forward(params, x, t, c))


def test_rms_norm_module_matches_function(rng):
    x = torch.randn(4, 6, generator=rng)
    with torch.no_grad():
        assert torch.equal(RmsNorm(6).to(torch.float64)(x), rms_norm(x, torch.ones(6)))
