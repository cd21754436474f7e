import math

import pytest
import torch

from app.core.exceptions import DomainError, ShapeMismatchError
from app.models.flow_path import LINEAR_PATH
from app.schemas.config import LossWeights, TimeSampler
from app.services import flow_service, network_service, objective_service


def test_fm_loss_is_mean_scaled_squared_error():
    v_hat = torch.tensor([[1.0, 2.0], [0.0, 0.0]])
    v_bar = torch.tensor([[0.0, 0.0], [0.0, 2.0]])
    # rows: (1 + 4)/2 and 4/2
    assert float(objective_service.fm_loss(v_hat, v_bar)) == pytest.approx((2.5 + 2.0) / 2)
    with pytest.raises(ShapeMismatchError):
        objective_service.fm_loss(v_hat, v_bar[:, :1])


def test_spd_loss_with_scaled_identity_equals_fm_loss(rng):
    v_hat = torch.randn(16, 3, generator=rng)
    v_bar = torch.randn(16, 3, generator=rng)
    M = objective_service.SpdMatrix.scaled_identity(3)
    assert float(objective_service.spd_loss(v_hat, v_bar, M)) == pytest.approx(
        float(objective_service.fm_loss(v_hat, v_bar)), rel=1e-14
    )


def test_spd_matrix_rejects_indefinite():
    with pytest.raises(DomainError):
        objective_service.SpdMatrix(torch.tensor([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(DomainError):
        objective_service.SpdMatrix(torch.tensor([[1.0, 0.5], [0.0, 1.0]]))


def test_contrastive_spot_values():
    zero = torch.tensor(0.0)
    assert float(objective_service.f_ls(torch.tensor(1.0), torch.tensor(-1.0))) == 0.0
    assert float(objective_service.f_ls(zero, zero)) == 2.0
    assert float(objective_service.f_ns(zero, zero)) == pytest.approx(2 * math.log(2))
    assert float(objective_service.f_hinge_d(torch.tensor(2.0), torch.tensor(-2.0))) == 0.0
    assert float(objective_service.f_relativistic(zero, zero)) == pytest.approx(math.log(2))


def test_ns_is_finite_at_extreme_logits():
    value = objective_service.f_ns(torch.tensor(-1e4), torch.tensor(1e4))
    assert math.isfinite(float(value))


def test_cafm_losses_are_ls_equilibrium_for_zero_d(small_d_spec, ring8, rng):
    d = network_service.init(small_d_spec, rng)
    batch = flow_service.sample_batch(ring8, LINEAR_PATH, TimeSampler(), rng, 32)
    g_output = torch.randn(32, 2, generator=rng)
    terms = objective_service.cafm_d_terms(d, batch, g_output, 1.0, objective_service.f_ls)
    assert float(terms["adv"]) == 2.0
    assert float(terms["cp"]) == 0.0


def test_generator_loss_reaches_generator_parameters(small_d_spec, small_g_spec, ring8, rng):
    d = network_service.init(small_d_spec, rng, zero_head=False)
    g = network_service.init(small_g_spec, rng, zero_head=False)
    batch = flow_service.sample_batch(ring8, LINEAR_PATH, TimeSampler(), rng, 16)

    def g_loss(tensors):
        return objective_service.cafm_g_loss(g, d, batch, 1.0, objective_service.f_ls, tensors)

    grads = torch.func.grad(g_loss)(dict(g.tensors))
    assert any(float(v.abs().max()) > 0 for v in grads.values())


def test_centering_penalty_zero_for_zero_head(small_d_spec, ring8, rng):
    d = network_service.init(small_d_spec, rng)
    batch = flow_service.sample_batch(ring8, LINEAR_PATH, TimeSampler(), rng, 8)
    assert float(objective_service.centering_penalty(d, batch)) == 0.0


def test_ot_regularizers():
    g_out = torch.tensor([[3.0, 4.0]])
    assert float(objective_service.ot_reg_continuous(g_out, 2)) == pytest.approx(12.5)
    x_s = torch.zeros(1, 2)
    assert float(objective_service.ot_discrete(g_out, x_s, torch.tensor([0.6]), torch.tensor([0.1]), 2)) == (
        pytest.approx(25.0)
    )
    with pytest.raises(DomainError):
        objective_service.ot_discrete(g_out, x_s, torch.tensor([0.5]), torch.tensor([0.5]), 2)


def test_afm_losses_are_ln2_for_zero_d(small_d_spec, rng):
    d = network_service.init(small_d_spec, rng)
    real = torch.randn(8, 2, generator=rng)
    fake = torch.randn(8, 2, generator=rng)
    t = torch.rand(8, generator=rng)
    assert float(objective_service.afm_adv_d(d, real, fake, t)) == pytest.approx(math.log(2))
    assert float(objective_service.afm_adv_g(d, real, fake, t)) == pytest.approx(math.log(2))


def test_r1_penalty_matches_input_gradient(random_d, rng):
    x = torch.randn(4, 2, generator=rng)
    t = torch.rand(4, generator=rng)
    penalty = objective_service.r1_penalty(random_d, x, t)
    grads = torch.stack([
        torch.func.grad(lambda row: network_service.d_forward(random_d, row[None], t[i:i + 1]).sum())(x[i])
        for i in range(4)
    ])
    assert float(penalty) == pytest.approx(float(grads.pow(2).sum(-1).mean()), rel=1e-12)


def test_totals_combine_weights():
    weights = LossWeights(lambda_cp=0.5, lambda_ot=2.0, lambda_gp=3.0)
    one = torch.tensor(1.0)
    assert float(objective_service.total_d_loss(weights, one, one)) == 1.5
    assert float(objective_service.total_d_loss(weights, one, one, one, one)) == 7.5
    assert float(objective_service.total_g_loss(weights, one, one)) == 3.0
    assert float(objective_service.total_g_loss(weights, one, one, lambda_ot=0.0)) == 1.0
