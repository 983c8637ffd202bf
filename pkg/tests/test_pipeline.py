import math

import numpy as np
import pytest

from dpsyngen.data import make_bars16
from dpsyngen.diffusion import DdpmSchedule
from dpsyngen.errors import BudgetExhaustedError, ConfigurationError, RejectedInputError
from dpsyngen.numerics.denoiser import init_denoiser
from dpsyngen.pipeline import (DataSource, PhaseConfig, SamplerGrid, TrainRun, band_from_ddpm_steps,
                               ddim_sample, forward_then_clean, stage_switch_sample, train_syngen)
from dpsyngen.privacy import DPConfig
from dpsyngen.stages import Variant, default_plan
from dpsyngen.synthgen import generate_batch

TINY = dict(hidden=(16,), n_fourier=2)


def test_grid_endpoints_exact_and_decreasing():
    s = SamplerGrid().sigmas
    assert s[0] == 80.0 and s[-1] == 0.002
    assert np.all(np.diff(s) < 0) and s.size == 64
    with pytest.raises(RejectedInputError):
        SamplerGrid(sigma_min=1.0, sigma_max=0.5)


def test_single_point_oracle_converges():
    target = np.linspace(0, 1, 16)
    oracle = lambda x, s, labels: np.broadcast_to(target, x.shape)
    out = ddim_sample(oracle, SamplerGrid(steps=64), 5, np.random.default_rng(0), image_shape=(1, 4, 4))
    assert np.max(np.abs(out.reshape(5, -1) - target)) < 1e-3


def test_sampler_deterministic_and_empty():
    p = init_denoiser((1, 4, 4), (8,), 2, rng=0)
    g = SamplerGrid(steps=8)
    a = ddim_sample(p, g, 3, np.random.default_rng(5))
    assert np.array_equal(a, ddim_sample(p, g, 3, np.random.default_rng(5)))
    assert ddim_sample(p, g, 0, np.random.default_rng(5)).shape == (0, 1, 4, 4)


def test_stage_switch_degenerate_cases():
    p = init_denoiser((1, 4, 4), (8,), 2, rng=0)
    q = init_denoiser((1, 4, 4), (8,), 2, rng=1)
    g = SamplerGrid(steps=8)
    base = ddim_sample(p, g, 3, np.random.default_rng(1))
    assert np.array_equal(stage_switch_sample(p, p, (-1, 1), g, 3, np.random.default_rng(1)), base)
    whole = (math.log(0.001), math.log(100))
    assert np.array_equal(stage_switch_sample(p, q, whole, g, 3, np.random.default_rng(1)), base)
    assert not np.array_equal(stage_switch_sample(p, q, (-1, 1), g, 3, np.random.default_rng(1)), base)


def test_ddpm_band_mapping():
    lo, hi = band_from_ddpm_steps(250, 750, DdpmSchedule.linear())
    assert -0.2 < lo < 0.1 and 2.6 < hi < 3.0


def test_forward_then_clean_small_tau_is_near_identity():
    p = init_denoiser((1, 4, 4), (8,), 2, rng=0)
    x = np.random.default_rng(0).random((4, 1, 4, 4))
    out = forward_then_clean(p, x, math.log(0.002), SamplerGrid(), np.random.default_rng(1))
    assert np.max(np.abs(out - x)) < 0.05
    again = forward_then_clean(p, x, math.log(0.002), SamplerGrid(), np.random.default_rng(1))
    assert np.array_equal(out, again)
    with pytest.raises(RejectedInputError):
        forward_then_clean(p, x, 10.0, SamplerGrid(), np.random.default_rng(1))


def _coarse_run(dp=None, epochs=1.0, n=40):
    priv = DataSource(make_bars16(n, 0).images, name="private")
    syn = DataSource(generate_batch("dead-leaves", 30, 0), name="synthetic")
    return TrainRun(private=priv, plan=default_plan(Variant.COARSE), synthetic=syn,
                    phase1=PhaseConfig(batch_size=16, max_epochs=3),
                    phase2=PhaseConfig(batch_size=16, early_stop=False),
                    dp=dp, private_epochs=epochs, **TINY)


def test_phase_isolation_and_sigma_laws_under_dp():
    dp = DPConfig(epsilon=10.0, q=0.25, steps=8, multiplicity=4)
    run = _coarse_run(dp, epochs=2.0)
    res = train_syngen(run, seed=3)
    assert res.reads["phase1_private"] == 0 and res.reads["phase2_synthetic"] == 0
    assert res.reads["phase1_synthetic"] > 0 and res.reads["phase2_private"] > 0
    assert np.all(res.sigma_log["synthetic"] > 2.0)
    assert np.all(res.sigma_log["private"] <= 3.0)
    assert res.ledger.steps == 8
    eps = [m["epsilon_so_far"] for m in res.metrics if m["phase"] == "private"]
    assert max(eps) <= 10.0
    assert 9.99 <= res.ledger.epsilon(1e-5) <= 10.0


def test_budget_exhaustion_aborts_with_ledger():
    dp = DPConfig(epsilon=1.0, q=0.25, steps=4, noise_multiplier=0.6, multiplicity=2)
    with pytest.raises(BudgetExhaustedError) as info:
        train_syngen(_coarse_run(dp, epochs=5.0), seed=0)
    assert info.value.ledger.epsilon(1e-5) <= 1.0
    assert info.value.ledger.steps >= 0


def test_finetune_private_phase_is_untruncated():
    priv = DataSource(make_bars16(500, 0).images)
    syn = DataSource(generate_batch("dead-leaves", 20, 0))
    run = TrainRun(private=priv, plan=default_plan(Variant.FINETUNE), synthetic=syn,
                   phase1=PhaseConfig(batch_size=20, max_epochs=1),
                   phase2=PhaseConfig(batch_size=250, early_stop=False), private_epochs=60, **TINY)
    log = train_syngen(run, seed=0).sigma_log["private"]
    assert log.min() < -3 and log.max() > 3


def test_baseline_has_no_phase_one():
    priv = DataSource(make_bars16(20, 0).images)
    run = TrainRun(private=priv, phase2=PhaseConfig(batch_size=10, early_stop=False),
                   private_epochs=1, **TINY)
    res = train_syngen(run, seed=0)
    assert res.sigma_log["synthetic"].size == 0
    assert "phase1_private" not in res.reads


def test_configuration_errors():
    with pytest.raises(ConfigurationError):
        train_syngen(TrainRun(private=DataSource(np.zeros((0, 1, 4, 4))), **TINY))
    run = _coarse_run()
    run.synthetic = None
    with pytest.raises(ConfigurationError):
        train_syngen(run)


def test_metrics_csv(tmp_path):
    res = train_syngen(_coarse_run(), seed=0)
    res.write_metrics(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "phase,step,loss,ln_sigma_mean,epsilon_so_far"


def test_well_trained_model_cleans_light_noise():
    ds = make_bars16(1000, 0)
    run = TrainRun(private=DataSource(ds.images), hidden=(256, 256), n_fourier=16,
                   phase2=PhaseConfig(lr=2e-3, early_stop=False), private_epochs=15)
    params = train_syngen(run, seed=0).params
    test = make_bars16(200, 1).images
    tau = math.log(0.05)
    rec = forward_then_clean(params, test, tau, SamplerGrid(), np.random.default_rng(0))
    assert np.mean((rec - test) ** 2) <= 5 * math.exp(2 * tau)
