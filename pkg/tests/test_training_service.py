import logging
import math

import pytest
import torch

from app.core.exceptions import ConfigError, NonFiniteError
from app.models.mixture import get_preset
from app.services import network_service, objective_service, sampler_service
from app.services.training_service import AdamState, SpikeMonitor, TrainingService, adam_step


def quiet(config, **updates):
    """Evaluate only at the final step."""
    updates.setdefault("eval_every", 10**6)
    return config.model_copy(update=updates)


def constant_grads(params, value):
    return {name: torch.full_like(tensor, value) for name, tensor in params.items()}


def test_adam_first_step_moves_by_lr(small_g_spec):
    params = network_service.init(small_g_spec, 0, zero_head=False)
    before = params.clone()
    state = AdamState(params)
    adam_step(state, params, constant_grads(params, 4.0), 0.1, (0.0, 0.95), 1e-8, 0.0)
    for name in params:
        assert torch.allclose(params[name], before[name] - 0.1, atol=1e-8, rtol=0)
    assert state.step == 1
    assert torch.equal(state.moments()["exp_avg"]["head.bias"], torch.full_like(params["head.bias"], 4.0))


def test_adam_zero_gradient_still_counts_step(small_g_spec):
    params = network_service.init(small_g_spec, 0, zero_head=False)
    before = params.clone()
    state = AdamState(params)
    adam_step(state, params, constant_grads(params, 0.0), 0.1, (0.9, 0.999), 1e-8, 0.0)
    assert all(torch.equal(params[name], before[name]) for name in params)
    assert state.step == 1


def test_adam_moments_reload(small_g_spec):
    params = network_service.init(small_g_spec, 0, zero_head=False)
    state = AdamState(params)
    adam_step(state, params, constant_grads(params, 1.0), 0.01, (0.9, 0.999), 1e-8, 0.0)
    clone = params.clone()
    restored = AdamState(clone)
    restored.load_moments(state.moments())
    adam_step(state, params, constant_grads(params, 2.0), 0.01, (0.9, 0.999), 1e-8, 0.0)
    adam_step(restored, clone, constant_grads(clone, 2.0), 0.01, (0.9, 0.999), 1e-8, 0.0)
    assert all(torch.equal(params[name], clone[name]) for name in params)


def test_spike_monitor_flags_large_norms():
    monitor = SpikeMonitor("g")
    for step in range(10):
        assert not monitor.observe(1.0, step)
    assert monitor.observe(20.0, 10)
    assert monitor.spikes == 1


def test_fm_training_is_deterministic(tmp_path, tiny_run_config, gm1d2):
    config = tiny_run_config()
    TrainingService(config, gm1d2, tmp_path / "a").train_fm()
    TrainingService(config, gm1d2, tmp_path / "b").train_fm()
    for name in ("metrics.csv", "checkpoint.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fm_records_at_eval_interval(tiny_run_config, gm1d2):
    result = TrainingService(tiny_run_config(), gm1d2).train_fm()
    assert [row.step for row in result.metrics] == [10, 20]
    assert all(row.phase == "fm" and row.loss_g is not None for row in result.metrics)
    assert result.counters["g"] == 20


def test_non_finite_loss_aborts(monkeypatch, tiny_run_config, gm1d2):
    monkeypatch.setattr(objective_service, "fm_loss", lambda v_hat, v_bar: (v_hat * float("nan")).mean())
    with pytest.raises(NonFiniteError) as info:
        TrainingService(tiny_run_config(), gm1d2).train_fm()
    assert (info.value.step, info.value.phase) == (1, "fm")


def test_initial_generator_must_match_configured_network(tiny_run_config, gm1d2, small_g_spec):
    foreign = network_service.init(small_g_spec, 0)
    with pytest.raises(ConfigError):
        TrainingService(tiny_run_config(), gm1d2).train_fm(foreign)


@pytest.mark.parametrize(
    "total, n_disc, expected",
    [(170, 16, {"d": 160, "g": 10}), (20, 4, {"d": 16, "g": 4}), (22, 4, {"d": 18, "g": 4})],
)
def test_cafm_update_accounting(tiny_run_config, gm1d2, total, n_disc, expected):
    config = quiet(tiny_run_config(objective="cafm", total_steps=total, n_disc=n_disc))
    result = TrainingService(config, gm1d2).train_cafm()
    assert result.counters["d"] == expected["d"]
    assert result.counters["g"] == expected["g"]
    assert result.optimizer_d.step == expected["d"]
    assert result.optimizer_g.step == expected["g"]
    assert result.step == total


def test_n_disc_schedule_switches_cycle_length(tiny_run_config, gm1d2):
    config = quiet(tiny_run_config(
        objective="cafm", total_steps=20, n_disc=4, schedules={"n_disc": [{"step": 10, "value": 1}]}
    ))
    result = TrainingService(config, gm1d2).train_cafm()
    assert result.counters == {"warmup_d": 0, "d": 13, "g": 7}


def test_warmup_leaves_generator_untouched(tiny_run_config, gm1d2):
    config = quiet(tiny_run_config(objective="cafm", total_steps=6, d_warmup_steps=6))
    service = TrainingService(config, gm1d2)
    init = network_service.init(service.generator_spec(), 3, zero_head=False)
    result = service.train_cafm(init)
    assert all(torch.equal(result.generator[name], init[name]) for name in init)
    assert result.counters == {"warmup_d": 6, "d": 0, "g": 0}
    assert result.metrics[-1].phase == "warmup"


def test_cafm_first_discriminator_loss_is_ls_equilibrium(tiny_run_config, gm1d2):
    config = quiet(tiny_run_config(objective="cafm", total_steps=1))
    result = TrainingService(config, gm1d2).train_cafm()
    assert result.metrics[-1].loss_d_adv == pytest.approx(2.0)


def test_afm_zero_discriminator_gives_ln2(tiny_run_config, gm1d2):
    config = quiet(tiny_run_config(
        objective="afm", total_steps=1, n_disc=1, weights={"lambda_cp": 0.0, "lambda_gp": 0.0}
    ))
    result = TrainingService(config, gm1d2).train_afm()
    row = result.metrics[-1]
    assert row.loss_d_adv == pytest.approx(math.log(2))
    assert row.loss_d_cp == 0.0
    assert row.field_rel_mse is None
    assert result.generator.spec.num_times == 2


def test_afm_runs_full_cycles_on_conditional_data(tiny_run_config):
    config = quiet(tiny_run_config(objective="afm", dataset="ring8-cond", total_steps=4, n_disc=1))
    result = TrainingService(config, get_preset("ring8-cond")).run()
    assert result.counters == {"warmup_d": 0, "d": 2, "g": 2}


def test_oracle_objective_is_not_trainable(tiny_run_config, gm1d2):
    with pytest.raises(ConfigError):
        TrainingService(tiny_run_config(objective="oracle"), gm1d2).run()




def test_lambda_ot_schedule_switches_generator_loss(tiny_run_config, gm1d2, caplog):
    config = quiet(
        tiny_run_config(objective="cafm", total_steps=12, n_disc=2, weights={"lambda_ot": 0.0},
                        schedules={"lambda_ot": [{"step": 6, "value": 1.0}]}),
        eval_every=3,
    )
    with caplog.at_level(logging.INFO, logger="app.services.training_service"):
        result = TrainingService(config, gm1d2).train_cafm()

    assert "lambda_ot: 0.0 -> 1.0 at step 8" in caplog.text
    rows = {row.step: row for row in result.metrics}
    assert sorted(rows) == [3, 6, 9, 12]
    for step in (3, 6):
        assert rows[step].loss_g == rows[step].loss_g_adv
    for step in (9, 12):
        assert rows[step].loss_g == pytest.approx(rows[step].loss_g_adv + rows[step].loss_g_ot)
    assert rows[12].loss_g_ot > 0.0


def test_afm_run_feeds_difference_sampler(tiny_run_config, gm1d2, rng):
    config = quiet(tiny_run_config(objective="afm", total_steps=40, n_disc=1))
    result = TrainingService(config, gm1d2).train_afm()
    assert result.counters == {"warmup_d": 0, "d": 20, "g": 20}
    assert math.isfinite(result.metrics[-1].energy_distance)

    x1 = sampler_service.prior_sample(rng, 256, 1)
    step_fn = sampler_service.afm_step_fn(result.ema.shadow)
    x0 = sampler_service.afm_difference_sampler(step_fn, x1, sampler_service.uniform_tau(8))
    assert x0.shape == (256, 1)
    assert bool(torch.isfinite(x0).all())
    assert not torch.equal(x0, x1)
