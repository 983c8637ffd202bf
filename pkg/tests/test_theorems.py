import math

import numpy as np
import pytest

from dpsyngen.diffusion import DdpmSchedule
from dpsyngen.errors import NotFoundError, OutOfRegionError, RejectedInputError
from dpsyngen.theorems import (TheoremTrial, analytic_thm1_step, chernoff_ratio, energy_distance,
                               marginal_energy_distance, mc_slack, thm2_difference, thm2_gamma,
                               toy_sampler, verify_thm1, verify_thm2)

SCHED = DdpmSchedule.linear()
ZEROS = toy_sampler("zeros", 4)
ONES = lambda rng, m: np.ones((m, 16))


def test_thm1_identical_distributions_give_first_step():
    t = TheoremTrial(toy_sampler("salt-pepper", 4), None, 16, identical=True, draws=1000)
    r = verify_thm1(t, SCHED, rng=0)
    assert r.N == 1 and r.exceedance.max() == 0.0


def test_thm1_deterministic_pair_hits_analytic_step():
    # ||X0 - Y0|| = 4 for every pair, so exceedance drops from 1 to 0 exactly at n*
    t = TheoremTrial(ZEROS, ONES, 16, nu=0.5, gamma=0.5, draws=1000)
    r = verify_thm1(t, SCHED, rng=0, stride=1)
    assert r.N == analytic_thm1_step(SCHED, 4.0, 0.5)
    assert r.identity_error < 1e-12


def test_thm1_unreachable_raises_not_found():
    t = TheoremTrial(ZEROS, lambda rng, m: np.full((m, 16), 1e4), 16, nu=0.5, draws=1000)
    with pytest.raises(NotFoundError) as info:
        verify_thm1(t, SCHED, rng=0)
    assert info.value.terminal_value == 1.0


def test_trial_validation():
    with pytest.raises(RejectedInputError):
        TheoremTrial(ZEROS, ONES, 16, gamma=1.5)
    with pytest.raises(RejectedInputError):
        TheoremTrial(ZEROS, ONES, 16, nu=0)
    t = TheoremTrial(ZEROS, ONES, 16, coupling="independent-noise", draws=1000)
    with pytest.raises(RejectedInputError):
        verify_thm1(t, SCHED)


def test_energy_distance_zero_in_expectation_and_positive_for_shift():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(500, 3)), rng.normal(size=(500, 3))
    assert abs(energy_distance(x, y)) < 0.05
    # 1-d closed form for N(0,1) vs N(m,1) is large for m = 3
    assert energy_distance(x, y + 3.0) > 2.0


def test_marginal_energy_small_at_T():
    t = TheoremTrial(toy_sampler("bars16"), toy_sampler("salt-pepper"), 256, draws=1000)
    assert abs(marginal_energy_distance(t, SCHED, SCHED.T, m=500, rng=1)) < 0.05


def test_thm2_decomposition_identity():
    rng = np.random.default_rng(2)
    x0, y0, z1, z2 = (rng.normal(size=(10, 8)) for _ in range(4))
    a = 0.9
    lit = thm2_difference(x0, y0, z1, z2, a)
    dec = (math.sqrt(a) - 1) * (x0 - y0) + math.sqrt(1 - a) * (z1 - z2)
    assert np.max(np.abs(lit - dec)) < 1e-12


def test_thm2_gamma_formula_by_hand():
    a, nu, d, e = 0.9999, 1.0, 4, 2.0
    ratio = nu * nu / (8 * d * (1 - a))
    expect = 2 * (1 - math.sqrt(a)) / nu * e + math.exp(-nu * nu / (16 * (1 - a)) + d / 2 - d / 2 * math.log(ratio))
    assert thm2_gamma(a, nu, d, e) == pytest.approx(expect, rel=1e-14)
    assert chernoff_ratio(a, nu, d) == pytest.approx(ratio)


def test_thm2_gamma_region_guard():
    assert chernoff_ratio(0.999, 2.0, 256) < math.e
    with pytest.raises(OutOfRegionError):
        thm2_gamma(0.999, 2.0, 256, 1.0)
    with pytest.raises(OutOfRegionError):
        thm2_gamma(1.0, 2.0, 256, 1.0)


def test_thm2_gamma_decreases_towards_one():
    vals = [thm2_gamma(a, 2.0, 256, 7.0) for a in (0.9997, 0.99997, 0.999997)]
    assert vals[0] > vals[1] > vals[2]


def test_verify_thm2_statuses_and_csv(tmp_path):
    t = TheoremTrial(toy_sampler("bars16"), toy_sampler("salt-pepper"), 256, nu=2.0, draws=2000)
    rep = verify_thm2(t, [0.999, 0.9997], rng=0)
    assert [r.status for r in rep.rows] == ["skipped", "pass"]
    assert rep.passed
    rep.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == \
        "alpha_bar,empirical_p,gamma_bound,slack,status"


def test_verify_thm2_detects_large_deviation():
    # alpha_bar = 0.5 with nu small: exceedance ~1, bound region invalid -> skipped, not fail
    t = TheoremTrial(ZEROS, ONES, 16, nu=0.1, draws=1000)
    rep = verify_thm2(t, [0.5], rng=0)
    assert rep.rows[0].empirical_p == 1.0 and rep.rows[0].status == "skipped"


def test_mc_slack():
    assert mc_slack(0.0, 100) == 0.0
    assert mc_slack(0.5, 10_000) == pytest.approx(0.02)
