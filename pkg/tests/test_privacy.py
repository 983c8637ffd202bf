import math

import numpy as np
import pytest
from scipy import integrate, optimize

from dpsyngen.errors import InfeasibleTargetError, NumericalError, RejectedInputError
from dpsyngen.numerics.denoiser import init_denoiser
from dpsyngen.numerics.grad import GradientVector, loss_and_grad
from dpsyngen.privacy import (ORDERS, DPConfig, PrivacyLedger, calibrate_noise, clip,
                              compute_epsilon, multiplicity_loss, noisy_aggregate, rdp_account,
                              rdp_subsampled_gaussian, rdp_to_epsilon)


# -- independent numeric oracle ----------------------------------------------

def oracle_log_a(q, s, alpha):
    """log E_{z~N(0,s^2)} (1 - q + q exp((2z - 1)/(2 s^2)))^alpha by quadrature."""
    def log_f(z):
        inner = np.logaddexp(math.log1p(-q), math.log(q) + (2 * z - 1) / (2 * s * s))
        return alpha * inner - z * z / (2 * s * s) - math.log(s * math.sqrt(2 * math.pi))

    peak = optimize.minimize_scalar(lambda z: -log_f(z), bounds=(-50 * s, 50 * s + alpha),
                                    method="bounded").x
    top = log_f(peak)
    g = lambda z: math.exp(log_f(z) - top)
    left = integrate.quad(g, -np.inf, peak, epsabs=0, epsrel=1e-11, limit=400)[0]
    right = integrate.quad(g, peak, np.inf, epsabs=0, epsrel=1e-11, limit=400)[0]
    return top + math.log(left + right)


def oracle_epsilon(q, s, steps, delta, orders=ORDERS):
    rdp = np.array([steps * oracle_log_a(q, s, a) / (a - 1) for a in orders])
    return float(np.min(rdp + math.log(1 / delta) / (orders - 1)))


@pytest.mark.parametrize("q,s,alpha", [(0.01, 1.0, 2.0), (0.01, 1.0, 1.5), (0.1, 2.0, 7.0),
                                       (0.05, 0.8, 2.5), (0.2, 4.0, 32.0), (0.001, 0.6, 1.25)])
def test_rdp_matches_quadrature(q, s, alpha):
    got = rdp_subsampled_gaussian(q, s, [alpha])[0]
    want = oracle_log_a(q, s, alpha) / (alpha - 1)
    assert got == pytest.approx(want, rel=1e-6, abs=1e-12)


def test_full_batch_closed_form():
    # with alpha* = 1 + s sqrt(2 log(1/delta)) on the grid, the grid minimum is the true minimum
    delta = 1e-5
    L = math.log(1 / delta)
    s = 10.0 / math.sqrt(2 * L)
    eps = compute_epsilon(1.0, s, 1, delta)
    assert eps == pytest.approx(1 / (2 * s * s) + math.sqrt(2 * L) / s, abs=1e-6)


def test_full_batch_rdp_is_linear_in_order():
    assert np.allclose(rdp_subsampled_gaussian(1.0, 2.0, ORDERS), ORDERS / 8.0, rtol=1e-15)


def test_rdp_at_q_one_matches_limit_of_small_q_formula():
    near = rdp_subsampled_gaussian(0.999999, 3.0, [2.0, 8.0])
    assert np.allclose(near, [2 / 18, 8 / 18], rtol=1e-4)


def test_rdp_monotone_in_q_and_noise():
    a = rdp_subsampled_gaussian(0.01, 1.0)
    assert np.all(rdp_subsampled_gaussian(0.02, 1.0) >= a)
    assert np.all(rdp_subsampled_gaussian(0.01, 2.0) <= a)


def test_rdp_to_epsilon_picks_minimum():
    orders = np.array([2.0, 3.0, 4.0])
    eps, order = rdp_to_epsilon(np.array([5.0, 1.0, 3.0]), orders, math.exp(-1))
    assert (eps, order) == (pytest.approx(1.5), 3.0)


def test_ledger_composition_is_additive():
    a = PrivacyLedger().record(0.01, 1.1, 300)
    b = PrivacyLedger().record(0.05, 2.0, 40).record(0.01, 1.1, 700)
    both = a.compose(b)
    assert both.steps == 1040
    one = rdp_subsampled_gaussian(0.01, 1.1)
    two = rdp_subsampled_gaussian(0.05, 2.0)
    assert np.allclose(both.rdp, 1000 * one + 40 * two, rtol=1e-13)
    assert np.array_equal(rdp_account(0.01, 1.1, 1000).rdp, PrivacyLedger().record(0.01, 1.1, 1000).rdp)


def test_epsilon_after_does_not_mutate():
    led = PrivacyLedger().record(0.1, 1.0, 10)
    before = led.epsilon()
    nxt = led.epsilon_after(0.1, 1.0, 5)
    assert led.epsilon() == before and led.steps == 10
    assert nxt == pytest.approx(compute_epsilon(0.1, 1.0, 15))


def test_zero_steps_is_zero_epsilon():
    assert PrivacyLedger().epsilon() == 0.0
    assert rdp_account(0.1, 1.0, 0).epsilon() == 0.0


def test_ledger_rows_and_csv(tmp_path):
    led = PrivacyLedger().record(0.1, 1.0, 3)
    rows = list(led.per_step_rows())
    assert [r[0] for r in rows] == [1, 2, 3]
    assert all(b[3] >= a[3] for a, b in zip(rows, rows[1:]))
    assert rows[-1][3] == pytest.approx(led.epsilon())
    led.write_csv(tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "step,q,sigma_noise,epsilon"


@pytest.mark.parametrize("eps", [0.2, 1.0, 10.0])
def test_calibration_lands_just_below_target(eps):
    s = calibrate_noise(eps, 1e-5, 0.01, 1000)
    got = compute_epsilon(0.01, s, 1000, 1e-5)
    assert 0.999 * eps <= got <= eps


def test_calibration_infeasible():
    with pytest.raises(InfeasibleTargetError):
        calibrate_noise(1e-9, 1e-5, 1.0, 10_000_000)


def test_dp_config_calibrated_round_trip():
    cfg = DPConfig(epsilon=1.0, q=0.1, steps=100).calibrated()
    assert 0.999 <= compute_epsilon(cfg.q, cfg.noise_multiplier, cfg.steps, cfg.delta) <= 1.0


def test_rejects_bad_inputs():
    with pytest.raises(RejectedInputError):
        rdp_subsampled_gaussian(0.0, 1.0)
    with pytest.raises(RejectedInputError):
        rdp_subsampled_gaussian(0.1, -1.0)
    with pytest.raises(ValueError):
        DPConfig(epsilon=-1)


# -- DP-SGD mechanics --------------------------------------------------------

def test_clip_scales_only_large_gradients():
    big = clip(np.array([3.0, 4.0]), 1.0)
    assert big.norm == pytest.approx(1.0)
    assert np.allclose(big.values, [0.6, 0.8])
    small = clip(np.array([0.3, 0.4]), 1.0)
    assert np.array_equal(small.values, [0.3, 0.4])
    with pytest.raises(NumericalError):
        clip(np.array([np.nan]), 1.0)
    with pytest.raises(RejectedInputError):
        clip(np.ones(2), 0.0)


def test_noisy_aggregate_without_noise_is_mean_of_clipped():
    grads = [GradientVector(np.array([3.0, 4.0])), GradientVector(np.array([0.1, 0.0]))]
    out = noisy_aggregate(grads, 1.0, 0.0, 4.0, np.random.default_rng(0))
    assert np.allclose(out.values, np.array([0.7, 0.8]) / 4.0)


def test_noisy_aggregate_noise_scale():
    out = noisy_aggregate([], 2.0, 3.0, 10.0, np.random.default_rng(1), dim=200_000)
    assert out.values.std() == pytest.approx(3.0 * 2.0 / 10.0, rel=0.01)
    with pytest.raises(RejectedInputError):
        noisy_aggregate([], 1.0, 1.0, 1.0, np.random.default_rng(0))


def test_multiplicity_reduces_gradient_variance():
    p = init_denoiser((1, 4, 4), (16,), 4, rng=0)
    x0 = np.random.default_rng(1).random(16)
    law_rng = np.random.default_rng(2)

    def grads(k):
        out = []
        for _ in range(200):
            sig = np.exp(law_rng.normal(-1.2, 1.2, k))
            _, g = loss_and_grad(p, lambda q, w, _: multiplicity_loss(q, w, x0, sig, law_rng), None)
            out.append(g)
        return np.var(np.array(out), axis=0).sum()

    assert grads(16) < grads(1)


def test_multiplicity_loss_is_mean_of_single_losses():
    p = init_denoiser((1, 4, 4), (8,), 2, rng=0)
    x0 = np.linspace(0, 1, 16)
    sig = np.array([0.1, 1.0, 5.0])
    from dpsyngen.numerics.denoiser import weight_vars
    w = weight_vars(p, requires_grad=False)
    full = multiplicity_loss(p, w, x0, sig, np.random.default_rng(3)).value
    rng = np.random.default_rng(3)
    etas = rng.standard_normal((3, 16))
    parts = [multiplicity_loss(p, w, x0, sig[i:i + 1], _Fixed(etas[i:i + 1])).value for i in range(3)]
    assert full == pytest.approx(np.mean(parts), rel=1e-12)


class _Fixed:
    def __init__(self, eta):
        self.eta = eta

    def standard_normal(self, shape):
        return self.eta.reshape(shape)
