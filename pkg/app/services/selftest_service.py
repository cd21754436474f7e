"""
Property suites run by `main.py selftest`.

Each suite takes a torch generator and returns a result dict
`{"suite": name, "success": bool, "detail": {...}}`. A suite never raises on a
failed property; unexpected exceptions are reported as failures by `run`.
"""
import logging
import time
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from scipy.optimize import minimize
from torch import Tensor

from app.core import autodiff
from app.core.streams import make_generator
from app.models.flow_path import LINEAR_PATH
from app.models.mixture import GaussianMixture, get_preset
from app.models.network import Parameters
from app.schemas.config import MlpSpec, SamplerConfig, SamplerKind, TimeSampler
from app.services import (
    evaluation_service, flow_service, network_service, objective_service, oracle_service, sampler_service,
)

logger = logging.getLogger(__name__)

Suite = Callable[[torch.Generator], Dict]

SPD_TOLERANCE = 1e-6
LINEARITY_TOLERANCE = 1e-10
JVP_FD_TOLERANCE = 1e-6
GRAD_FD_TOLERANCE = 1e-6
GRAD_THROUGH_JVP_TOLERANCE = 1e-5
PATH_TOLERANCE = 1e-3
QUADRATURE_TOLERANCE = 1e-4
SCORE_FD_TOLERANCE = 1e-6
SCORE_IDENTITY_TOLERANCE = 1e-8
EULER_SLOPE = (1.0, 0.15)
HEUN_SLOPE = (2.0, 0.25)
SDE_VARIANCE_TOLERANCE = 0.05


def _result(suite: str, success: bool, **detail) -> Dict:
    return {"suite": suite, "success": bool(success), "detail": detail}


def _small_spec(dim: int = 2, out_dim: int = 1) -> MlpSpec:
    return MlpSpec(
        in_dim=dim,
        hidden=(16, 16, 16),
        time_embed_dim=8,
        time_max_frequency=4.0,
        out_dim=out_dim,
        scalar_output=out_dim == 1,
    )


def _random_d(rng: torch.Generator, dim: int = 2) -> Parameters:
    # Non-zero head so derivatives are not trivially zero
    return network_service.init(_small_spec(dim), rng, zero_head=False)


def _random_batch(rng: torch.Generator, gm: GaussianMixture, batch: int):
    return flow_service.sample_batch(gm, LINEAR_PATH, TimeSampler(t_min=0.05, t_max=0.95), rng, batch)


# Suites

def spd_minimizer(rng: torch.Generator) -> Dict:
    """argmin_a mean (a − b)ᵀM(a − b) is the sample mean of b for SPD M."""
    worst = 0.0
    for trial in range(20):
        n = 2 + trial % 7
        a_rand = torch.randn(n, n, generator=rng, dtype=torch.float64)
        M = objective_service.SpdMatrix((a_rand @ a_rand.T + n * torch.eye(n, dtype=torch.float64)) / n)
        b = 3.0 * torch.randn(256, n, generator=rng, dtype=torch.float64)

        def loss(a: Tensor) -> Tensor:
            return objective_service.spd_loss(a.expand_as(b), b, M)

        def fun(a_np):
            a = torch.tensor(a_np, dtype=torch.float64)
            grad, value = torch.func.grad_and_value(loss)(a)
            return float(value), grad.numpy()

        found = minimize(fun, np.zeros(n), jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 500})
        worst = max(worst, float(np.abs(found.x - b.mean(dim=0).numpy()).max()))
    return _result("spd_minimizer", worst <= SPD_TOLERANCE, max_abs_error=worst, tolerance=SPD_TOLERANCE)


def jvp_linearity(rng: torch.Generator) -> Dict:
    """Mean of per-sample D_jvp over conditional velocities equals D_jvp at their mean."""
    gm = get_preset("ring8")
    d = _random_d(rng)
    count = 64
    t = 0.4
    x_t = flow_service.interpolate(
        LINEAR_PATH, oracle_service.sample(gm, rng, 1), torch.randn(1, 2, generator=rng, dtype=torch.float64), t
    ).expand(count, 2).clone()
    x = oracle_service.sample(gm, rng, count)
    # z chosen so every pair passes through the same x_t
    z = (x_t - (1.0 - t) * x) / t
    v_bar = flow_service.conditional_velocity(LINEAR_PATH, x, z, t)
    with torch.no_grad():
        _, per_sample = network_service.d_jvp(d, x_t, t, v_bar)
        _, at_mean = network_service.d_jvp(d, x_t, t, v_bar.mean(dim=0, keepdim=True).expand(count, 2))
    mean_of_jvp = per_sample.mean()
    scale = max(abs(float(at_mean[0])), float(per_sample.abs().mean()), 1e-12)
    error = abs(float(mean_of_jvp - at_mean[0])) / scale
    return _result("jvp_linearity", error <= LINEARITY_TOLERANCE, relative_error=error,
                   tolerance=LINEARITY_TOLERANCE)


def jvp_vs_fd(rng: torch.Generator) -> Dict:
    d = _random_d(rng)
    program = network_service.d_program(d)
    x = torch.randn(32, 2, generator=rng, dtype=torch.float64)
    t = torch.rand(32, generator=rng, dtype=torch.float64)
    x_dot = torch.randn(32, 2, generator=rng, dtype=torch.float64)
    t_dot = torch.randn(32, generator=rng, dtype=torch.float64)
    _, tangent = autodiff.jvp(program, (x, t), (x_dot, t_dot))
    reference = autodiff.finite_diff_jvp(program, (x, t), (x_dot, t_dot))
    error = autodiff.relative_error(tangent, reference)
    return _result("jvp_vs_fd", error <= JVP_FD_TOLERANCE, relative_error=error, tolerance=JVP_FD_TOLERANCE)


def grad_vs_fd(rng: torch.Generator) -> Dict:
    spec = _small_spec(2, out_dim=2)
    g = network_service.init(spec, rng, zero_head=False)
    batch = _random_batch(rng, get_preset("ring8"), 16)

    def loss(tensors):
        return objective_service.fm_loss(network_service.g_forward(g, batch.x_t, batch.t, None, tensors), batch.v_bar)

    grads = autodiff.grad(loss, g.tensors)
    reference = autodiff.finite_diff_grad(loss, g.tensors)
    names = g.names()
    flat = torch.cat([grads[name].reshape(-1) for name in names])
    flat_reference = torch.cat([reference[name].reshape(-1) for name in names])
    error = autodiff.relative_error(flat, flat_reference)
    worst = max(names, key=lambda name: float((grads[name] - reference[name]).abs().max()))
    return _result("grad_vs_fd", error <= GRAD_FD_TOLERANCE, relative_error=error, tolerance=GRAD_FD_TOLERANCE,
                   entries=int(flat.numel()), worst_parameter=worst)


def grad_through_jvp(rng: torch.Generator) -> Dict:
    """Parameter gradient of a loss built from JVP logits vs finite differences."""
    d = _random_d(rng)
    batch = _random_batch(rng, get_preset("ring8"), 16)
    fake = torch.randn(16, 2, generator=rng, dtype=torch.float64)

    def loss(tensors, inputs, tangents):
        x_t, t = inputs
        (real_dot,) = tangents
        _, real = network_service.d_jvp(d, x_t, t, real_dot, tensors=tensors)
        _, fake_logit = network_service.d_jvp(d, x_t, t, fake, tensors=tensors)
        return objective_service.f_ls(real, fake_logit).mean()

    param_grads, tangent_grads = autodiff.grad_through_jvp(loss, d.tensors, (batch.x_t, batch.t), (batch.v_bar,))
    names = ["layers.1.linear.bias", "head.weight"]
    reference = autodiff.finite_diff_grad(
        lambda tensors: loss(tensors, (batch.x_t, batch.t), (batch.v_bar,)), d.tensors, names=names
    )
    error = max(autodiff.relative_error(param_grads[name], reference[name]) for name in names)
    finite = all(bool(torch.isfinite(g).all()) for g in tangent_grads)
    return _result("grad_through_jvp", finite and error <= GRAD_THROUGH_JVP_TOLERANCE,
                   relative_error=error, tolerance=GRAD_THROUGH_JVP_TOLERANCE)


def path_consistency(rng: torch.Generator) -> Dict:
    d = _random_d(rng)
    x0 = torch.randn(8, 2, generator=rng, dtype=torch.float64)
    x1 = torch.randn(8, 2, generator=rng, dtype=torch.float64)
    ts, xs, vs = evaluation_service.straight_path(x0, x1, 1024)
    discrepancy = evaluation_service.path_consistency(d, ts, xs, vs)
    return _result("path_consistency", discrepancy <= PATH_TOLERANCE, discrepancy=discrepancy,
                   tolerance=PATH_TOLERANCE)


def oracle_vs_quadrature(rng: torch.Generator) -> Dict:
    """Closed-form velocity vs brute-force quadrature, and score vs d/dx log p_t."""
    gm = get_preset("gm1d2")
    worst_velocity = 0.0
    worst_score = 0.0
    for t in np.linspace(0.05, 0.95, 8):
        x_t = torch.linspace(-4.0, 4.0, 8, dtype=torch.float64)[:, None]
        closed = oracle_service.marginal_velocity(gm, x_t, float(t))
        brute = oracle_service.quadrature_conditional_velocity(gm, x_t, float(t))
        worst_velocity = max(worst_velocity, float((closed - brute).abs().max()))

        step = 1e-5
        fd = (oracle_service.log_density_t(gm, x_t + step, float(t))
              - oracle_service.log_density_t(gm, x_t - step, float(t))) / (2 * step)
        score = oracle_service.marginal_score(gm, x_t, float(t))[:, 0]
        worst_score = max(worst_score, autodiff.relative_error(fd, score))
    success = worst_velocity <= QUADRATURE_TOLERANCE and worst_score <= SCORE_FD_TOLERANCE
    return _result("oracle_vs_quadrature", success, velocity_abs_error=worst_velocity,
                   score_fd_error=worst_score)


def score_consistency(rng: torch.Generator) -> Dict:
    worst = 0.0
    for name in ("gm1d2", "ring8"):
        gm = get_preset(name)
        for t in np.linspace(0.05, 1.0, 12):
            x = oracle_service.sample(gm, rng, 64)
            z = torch.randn(64, gm.dim, generator=rng, dtype=torch.float64)
            x_t = flow_service.interpolate(LINEAR_PATH, x, z, float(t))
            v = oracle_service.marginal_velocity(gm, x_t, float(t))
            recovered = oracle_service.velocity_to_score(v, x_t, float(t))
            worst = max(worst, autodiff.relative_error(recovered, oracle_service.marginal_score(gm, x_t, float(t))))
    return _result("score_consistency", worst <= SCORE_IDENTITY_TOLERANCE, relative_error=worst,
                   tolerance=SCORE_IDENTITY_TOLERANCE)


def _narrow_gaussian() -> GaussianMixture:
    return GaussianMixture(
        name="narrow1d",
        weights=torch.ones(1, dtype=torch.float64),
        means=torch.zeros(1, 1, dtype=torch.float64),
        stds=torch.tensor([0.5], dtype=torch.float64),
    )


def _global_errors(kind: SamplerKind, field, x1: Tensor, exact: Tensor) -> List:
    errors = []
    for steps in (8, 16, 32, 64, 128):
        config = SamplerConfig(kind=kind, steps=steps)
        x0 = sampler_service.sample(field, x1, config)
        errors.append((steps, float((x0 - exact).abs().mean())))
    return errors


def sampler_orders(rng: torch.Generator) -> Dict:
    """Euler slope ≈ 1, Heun slope ≈ 2, and SDE terminal variance ≈ ODE's."""
    gm = _narrow_gaussian()
    field = oracle_service.oracle_field(gm)
    x1 = torch.randn(256, 1, generator=rng, dtype=torch.float64)
    # Single Gaussian: the flow map is x_t = x_1·sqrt((1−t)²σ² + t²)
    exact = x1 * float(gm.stds[0])
    euler = evaluation_service.convergence_slope(_global_errors(SamplerKind.EULER, field, x1, exact))
    heun = evaluation_service.convergence_slope(_global_errors(SamplerKind.HEUN, field, x1, exact))

    normal = oracle_service.oracle_field(get_preset("normal1d"))
    prior = torch.randn(20000, 1, generator=rng, dtype=torch.float64)
    ode = sampler_service.sample(normal, prior, SamplerConfig(kind=SamplerKind.EULER, steps=250))
    sde = sampler_service.sample(normal, prior, SamplerConfig(kind=SamplerKind.SDE, steps=250), rng)
    var_gap = abs(float(sde.var()) / float(ode.var()) - 1.0)

    success = (
        abs(euler - EULER_SLOPE[0]) <= EULER_SLOPE[1]
        and abs(heun - HEUN_SLOPE[0]) <= HEUN_SLOPE[1]
        and var_gap <= SDE_VARIANCE_TOLERANCE
    )
    return _result("sampler_orders", success, euler_slope=euler, heun_slope=heun, sde_variance_gap=var_gap)


def gradient_identity(rng: torch.Generator) -> Dict:
    """d/du of mean f_ls(D_jvp(u), b) is 2(a − 1)·∇ₓD / B; zero for a constant D."""
    d = _random_d(rng)
    batch = _random_batch(rng, get_preset("ring8"), 16)
    u = torch.randn(16, 2, generator=rng, dtype=torch.float64)
    with torch.no_grad():
        _, real = network_service.d_jvp(d, batch.x_t, batch.t, batch.v_bar)

    def g_loss(output: Tensor) -> Tensor:
        _, fake = network_service.d_jvp(d, batch.x_t, batch.t, output)
        return objective_service.f_ls(fake, real).mean()

    autodiff_grad = torch.func.grad(g_loss)(u)
    with torch.no_grad():
        _, a = network_service.d_jvp(d, batch.x_t, batch.t, u)
    grad_x = torch.func.grad(lambda x: network_service.d_forward(d, x, batch.t).sum())(batch.x_t)
    expected = objective_service.df_ls_da(a)[:, None] * grad_x / u.shape[0]
    identity_error = autodiff.relative_error(autodiff_grad, expected)

    fd = autodiff.finite_diff_grad(lambda p: g_loss(p["u"]), {"u": u})["u"]
    fd_error = autodiff.relative_error(autodiff_grad, fd)

    constant = network_service.init(_small_spec(), rng)  # zero head: D ≡ 0
    _, const_real = network_service.d_jvp(constant, batch.x_t, batch.t, batch.v_bar)

    def const_loss(output: Tensor) -> Tensor:
        _, fake = network_service.d_jvp(constant, batch.x_t, batch.t, output)
        return objective_service.f_ls(fake, const_real).mean()

    const_max = float(torch.func.grad(const_loss)(u).abs().max())
    success = (identity_error <= GRAD_THROUGH_JVP_TOLERANCE and fd_error <= GRAD_THROUGH_JVP_TOLERANCE
               and const_max == 0.0)
    return _result("gradient_identity", success, identity_error=identity_error, fd_error=fd_error,
                   constant_d_max_grad=const_max)


SUITES: Dict[str, Suite] = {
    "spd_minimizer": spd_minimizer,
    "jvp_linearity": jvp_linearity,
    "jvp_vs_fd": jvp_vs_fd,
    "grad_vs_fd": grad_vs_fd,
    "grad_through_jvp": grad_through_jvp,
    "path_consistency": path_consistency,
    "oracle_vs_quadrature": oracle_vs_quadrature,
    "score_consistency": score_consistency,
    "sampler_orders": sampler_orders,
    "gradient_identity": gradient_identity,
}


def _nonlinear_fault(tangent: Tensor) -> Tensor:
    return tangent + 0.1 * tangent * tangent.abs()


def run(seed: int = 0, names: Optional[List[str]] = None, inject_fault: bool = False) -> List[Dict]:
    """Run the named suites (all by default), each on its own seeded generator."""
    results = []
    for name in names or list(SUITES):
        rng = make_generator(seed, f"selftest/{name}")
        started = time.perf_counter()
        try:
            if inject_fault:
                with autodiff.fault_injection(_nonlinear_fault):
                    result = SUITES[name](rng)
            else:
                result = SUITES[name](rng)
        except Exception as e:
            logger.error(f"Suite {name} raised: {e}")
            result = _result(name, False, error=str(e))
        result["detail"]["seconds"] = round(time.perf_counter() - started, 3)
        status = "PASS" if result["success"] else "FAIL"
        logger.info(f"[{status}] {name}: {result['detail']}")
        results.append(result)
    return results
