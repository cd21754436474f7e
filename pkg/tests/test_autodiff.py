import pytest
import torch

from app.core import autodiff
from app.core.exceptions import NonScalarOutputError, ShapeMismatchError


def mlp(weights):
    w1, w2, w3 = weights

    def fn(x):
        h = torch.tanh(x @ w1)
        h = torch.tanh(h @ w2)
        return h @ w3

    return fn


@pytest.fixture
def weights(rng):
    return [torch.randn(3, 8, generator=rng), torch.randn(8, 8, generator=rng), torch.randn(8, 2, generator=rng)]


def test_jvp_matches_finite_differences(weights, rng):
    fn = mlp(weights)
    x = torch.randn(5, 3, generator=rng)
    dx = torch.randn(5, 3, generator=rng)
    value, tangent = autodiff.jvp(fn, (x,), (dx,))
    assert torch.equal(value, fn(x))
    reference = autodiff.finite_diff_jvp(fn, (x,), (dx,))
    assert autodiff.relative_error(tangent, reference) <= 1e-6


def test_jvp_of_linear_function_is_exact(rng):
    A = torch.randn(3, 3, generator=rng)
    x = torch.randn(4, 3, generator=rng)
    dx = torch.randn(4, 3, generator=rng)
    _, tangent = autodiff.jvp(lambda v: v @ A.T, (x,), (dx,))
    assert torch.allclose(tangent, dx @ A.T, atol=1e-14)


def test_jvp_rejects_mismatched_tangent():
    with pytest.raises(ShapeMismatchError):
        autodiff.jvp(torch.sin, (torch.zeros(3),), (torch.zeros(4),))


def test_jvp_multi_shares_value_and_matches_single_jvps(weights, rng):
    fn = mlp(weights)
    x = torch.randn(5, 3, generator=rng)
    tangents = [(torch.randn(5, 3, generator=rng),) for _ in range(3)]
    results = autodiff.jvp_multi(fn, (x,), tangents)
    assert len(results) == 3
    for (value, tangent), tangent_set in zip(results, tangents):
        _, single = autodiff.jvp(fn, (x,), tangent_set)
        assert torch.equal(value, fn(x))
        assert torch.allclose(tangent, single, atol=1e-12)


def test_jvp_multi_needs_a_tangent_set():
    with pytest.raises(ValueError):
        autodiff.jvp_multi(torch.sin, (torch.zeros(3),), [])


def test_grad_matches_finite_differences(rng):
    params = {"w": torch.randn(3, 2, generator=rng), "b": torch.randn(2, generator=rng)}
    x = torch.randn(6, 3, generator=rng)

    def loss(p, inputs):
        return torch.tanh(inputs @ p["w"] + p["b"]).pow(2).sum()

    grads = autodiff.grad(loss, params, x)
    reference = autodiff.finite_diff_grad(loss, params, x)
    for name in params:
        assert autodiff.relative_error(grads[name], reference[name]) <= 1e-6


def test_value_and_grad_with_aux(rng):
    params = {"w": torch.randn(3, generator=rng)}

    def loss(p):
        return p["w"].pow(2).sum(), {"norm": p["w"].norm()}

    grads, (value, aux) = autodiff.value_and_grad(loss, params, has_aux=True)
    assert torch.allclose(grads["w"], 2 * params["w"])
    assert float(value) == pytest.approx(float(params["w"].pow(2).sum()))
    assert float(aux["norm"]) == pytest.approx(float(params["w"].norm()))


def test_grad_rejects_non_scalar_output():
    with pytest.raises(NonScalarOutputError):
        autodiff.grad(lambda p: p["w"] * 2, {"w": torch.ones(3)})


def test_grad_through_jvp_matches_finite_differences(weights, rng):
    x = torch.randn(4, 3, generator=rng)
    dx = torch.randn(4, 3, generator=rng)
    params = {"w1": weights[0], "w2": weights[1], "w3": weights[2]}

    def loss(p, inputs, tangents):
        fn = mlp([p["w1"], p["w2"], p["w3"]])
        _, tangent = autodiff.jvp(fn, inputs, tangents)
        return (tangent - 1.0).pow(2).mean()

    param_grads, tangent_grads = autodiff.grad_through_jvp(loss, params, (x,), (dx,))
    reference = autodiff.finite_diff_grad(lambda p: loss(p, (x,), (dx,)), params, names=["w3"])
    assert autodiff.relative_error(param_grads["w3"], reference["w3"]) <= 1e-5
    assert tangent_grads[0].shape == dx.shape


def test_evaluate_checks_declared_signature():
    program = autodiff.Program(lambda x: x.sum(), signature=((None, 2),), name="sum2")
    assert float(autodiff.evaluate(program, torch.ones(5, 2))) == 10.0
    with pytest.raises(ShapeMismatchError):
        autodiff.evaluate(program, torch.ones(5, 3))


def test_finite_diff_step_must_be_positive():
    with pytest.raises(ValueError):
        autodiff.finite_diff_jvp(torch.sin, (torch.zeros(2),), (torch.ones(2),), step=0.0)


def test_fault_injection_is_scoped():
    x = torch.ones(3)
    with autodiff.fault_injection(lambda t: t + 1.0):
        _, faulty = autodiff.jvp(lambda v: 2 * v, (x,), (x,))
    _, clean = autodiff.jvp(lambda v: 2 * v, (x,), (x,))
    assert torch.equal(faulty, torch.full((3,), 3.0))
    assert torch.equal(clean, torch.full((3,), 2.0))
