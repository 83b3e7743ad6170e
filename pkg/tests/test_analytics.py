import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ges_choice, ges_integrand, grid_min_2d, grid_min_deadline, grid_min_demand
from varsched import analytics as an
from varsched.engine import batch_means_se, simulate, summarize
from varsched.model import ArrivalModel, Dist, MarkSampler, sample_arrivals
from varsched.policies import PolicyConfig

INF = math.inf
UNIT = an.MarkMoments.degenerate(1.0, 3.0, 2.0)  # the sigma=3, tau=2 family used by the worked examples


@pytest.fixture(autouse=True)
def quiet_thresholds():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", an.ThresholdWarning)
        yield


def dist_ii_moments(method="quadrature", **kw):
    return an.MarkMoments.from_model(ArrivalModel.distribution_ii(0.1, 2.0, 100.0), method=method, **kw)


def test_stationary_mean():
    assert an.stationary_mean(2.0, 3.0) == 6.0
    assert an.stationary_mean(0.0, 3.0) == 0.0
    assert an.stationary_mean(an.MarkMoments.degenerate(2, 3, 6), 3.0) == 6.0


def test_var_exact_examples():
    assert an.var_exact(an.MarkMoments.degenerate(2, 3, 6)) == pytest.approx(3.0)
    zero_laxity = an.MarkMoments.degenerate(1.5, 2.0, 2.0)
    assert an.var_exact(zero_laxity) == pytest.approx(1.5 * 2.0)
    marks = MarkSampler(Dist.uniform(1, 2), sojourn=Dist.const(4))
    quad = an.MarkMoments.from_model(marks, rate=1.0, method="quadrature")
    assert an.var_exact(quad) == pytest.approx(7 / 12, rel=1e-10)
    mc = an.MarkMoments.from_model(marks, rate=1.0, n_samples=200_000, seed=1)
    value, se = mc.expect_se(lambda s, t: s * s / t)
    assert abs(value - 7 / 12) <= 3 * se


def test_distribution_ii_closed_forms():
    quad = dist_ii_moments()
    assert quad.mean_sigma_sq_over_tau == pytest.approx(15 * math.log(2), rel=1e-9)
    assert quad.mean_sigma_sq_tau == pytest.approx(5625, rel=1e-9)
    assert quad.mean_sigma_sq == pytest.approx(700 / 3, rel=1e-9)
    mc = dist_ii_moments("monte_carlo", n_samples=200_000, seed=3)
    for f, want in [(lambda s, t: s * s / t, 15 * math.log(2)), (lambda s, t: s * s * t, 5625.0)]:
        value, se = mc.expect_se(f)
        assert abs(value - want) <= 3 * se


def test_soft_demand_examples():
    assert an.cost_soft_demand(UNIT, 2.0) == pytest.approx(4.0)
    assert an.cost_soft_demand(UNIT, 2.0) == pytest.approx(grid_min_demand(3, 2, 2.0), abs=1e-6)
    assert an.cost_soft_demand(UNIT, INF) == an.var_exact(UNIT)
    assert an.cost_soft_demand(UNIT, 0.0) == 0.0


def test_soft_deadline_examples():
    assert an.cost_soft_deadline(UNIT, 1.0) == pytest.approx(4.0)
    assert an.cost_soft_deadline(UNIT, 1.0) == pytest.approx(grid_min_deadline(3, 2, 1.0), abs=1e-6)
    assert an.cost_soft_deadline(UNIT, INF) == an.var_exact(UNIT)
    boundary = an.MarkMoments.degenerate(1.0, 1.0, 2.0)  # sigma/tau = sqrt(0.25)
    eps = 0.25
    below = an.cost_soft_deadline(boundary, eps * (1 + 1e-12))
    above = an.cost_soft_deadline(boundary, eps * (1 - 1e-12))
    assert below == pytest.approx(above, rel=1e-9)


def test_ges_examples():
    assert an.cost_ges(UNIT, 2.0, 4.0) == pytest.approx(4.0)
    best, gap = grid_min_2d(3.0, 2.0, 2.0, 4.0)
    assert best - gap <= 4.0 <= best + 1e-9
    for eps in (0.3, 1.0, 7.0):
        assert an.cost_ges(UNIT, INF, eps) == an.cost_soft_deadline(UNIT, eps)
    for C in (0.3, 1.0, 7.0):
        assert an.cost_ges(UNIT, C, INF) == an.cost_soft_demand(UNIT, C)


def test_threshold_warning():
    with warnings.catch_warnings():
        warnings.simplefilter("error", an.ThresholdWarning)
        an.cost_ges(UNIT, 1.0, 0.5)
        with pytest.raises(an.ThresholdWarning):
            an.cost_ges(UNIT, 3.0, 0.5)
        with pytest.raises(an.ThresholdWarning):
            an.cost_ges(UNIT, 1.0, 2.0)


@given(st.floats(0.1, 5), st.floats(1, 4), st.floats(0.1, 6))
def test_limits_recover_exact(rate, stretch, sigma):
    m = an.MarkMoments.degenerate(rate, sigma, sigma * stretch)
    assert an.cost_ges(m, INF, INF) == an.var_exact(m)


@given(st.floats(0.1, 5), st.floats(1, 3), st.floats(0.05, 10), st.floats(0.05, 10))
def test_cost_formula_is_the_pointwise_minimum(sigma, stretch, C, eps):
    tau = sigma * stretch
    m = an.MarkMoments.degenerate(1.0, sigma, tau)
    s_hat, t_hat = ges_choice(sigma, tau, C, eps)
    assert an.cost_ges(m, C, eps) == pytest.approx(ges_integrand(s_hat, t_hat, sigma, tau, C, eps), rel=1e-9)
    components = an.ges_cost_components(m, C, eps)
    assert components.total == pytest.approx(an.cost_ges(m, C, eps), rel=1e-9)


def test_lower_bound_examples():
    m = an.MarkMoments.degenerate(1.0, 1.0, 1.0)
    assert an.lower_bound_centralized(m, 0.25) == pytest.approx(1.0)
    assert an.lower_bound_centralized(m, 1e300) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        an.lower_bound_centralized(m, 0.0)


def test_exact_ratio_bounds():
    assert an.ratio_bound_exact(an.MarkMoments.degenerate(1.0, 1.0, 1.0)).same_var_x == pytest.approx(4 / 3)
    for rate, tau in [(0.5, 1.0), (2.0, 3.0)]:
        bound = an.ratio_bound_exact(an.MarkMoments.degenerate(rate, tau, tau))
        assert bound.general == pytest.approx(4 * (1 + rate * tau))


def test_exact_variance_respects_its_ratio_bound_against_offline():
    from varsched.qp import solve_offline
    model = ArrivalModel.distribution_ii(0.2, 2.0, 150.0)
    bound = an.ratio_bound_exact(an.MarkMoments.from_model(model, method="quadrature")).general
    for seed in range(5):
        jobs = sample_arrivals(model, seed)
        exact = summarize(simulate(jobs, PolicyConfig("exact"), 1.0)).var_P
        best = solve_offline(jobs, 1.0, tol=1e-7).objective()
        assert exact <= bound * best


def test_ges_ratio_bound_worked_example():
    b = an.ratio_bound_ges(UNIT, 2.0, 4.0)
    assert b.alpha == pytest.approx(2.0)
    assert b.beta == pytest.approx(26 / 3)
    assert b.factor_as_printed == pytest.approx(2.0 * 26 / 3 / 81)
    assert b.factor == pytest.approx(4 * b.factor_as_printed)


def test_ges_ratio_bound_reduces_to_exact_bound():
    for m in (an.MarkMoments.degenerate(1.0, 1.0, 1.0), UNIT, dist_ii_moments()):
        assert an.ratio_bound_ges(m, INF, INF).factor == pytest.approx(an.ratio_bound_exact(m).same_var_x)


def test_ges_ratio_bound_non_increasing_in_extension_regime():
    m = dist_ii_moments()
    eps_grid = np.geomspace(1e-3, 100.0, 60)
    factors = [an.ratio_bound_ges(m, INF, e).factor for e in eps_grid]
    assert np.all(np.diff(factors) <= 1e-12 * max(factors))
    assert factors[-1] == pytest.approx(an.ratio_bound_exact(m).same_var_x)


@pytest.mark.xfail(strict=True, reason="the demand-dropping branch of alpha is used verbatim and is not "
                                       "monotone; it is negative or unbounded for some (C, eps)")
def test_ges_ratio_bound_non_increasing_on_full_grid():
    m = dist_ii_moments()
    grid = [0.1, 0.5, 1.0, 2.0, 5.0, INF]
    table = np.array([[an.ratio_bound_ges(m, C, e).factor for e in grid] for C in grid])
    assert np.all(np.isfinite(table)) and np.all(table >= 0)
    assert np.all(np.diff(table, axis=0) <= 1e-12) and np.all(np.diff(table, axis=1) <= 1e-12)


def test_unknown_degradation_examples():
    one_two = an.MarkMoments.degenerate(1.0, 1.0, 2.0)
    assert an.unknown_degradation(one_two, 0.0, "soft_demand", 1.0) == 0.0
    assert an.unknown_degradation(one_two, 0.5, "soft_demand", 1.0) == pytest.approx(0.25)
    assert an.unknown_degradation(one_two, 1.0, "soft_deadline", 0.5) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        an.unknown_degradation(one_two, 0.5, "strict", 1.0)


def test_unknown_degradation_matches_simulation():
    marks = MarkSampler(Dist.const(1.0), sojourn=Dist.const(2.0), p_known=0.5)
    jobs = sample_arrivals(ArrivalModel.stationary_poisson(1.0, marks, 40000.0), 0)
    tr = simulate(jobs, PolicyConfig("ges_unknown", mode="soft_demand", fallback_c=1.0), 0.05)
    _, se = batch_means_se(tr.P[2000:])
    m = an.MarkMoments.degenerate(1.0, 1.0, 2.0)
    predicted = an.var_exact(m) + an.unknown_degradation(m, 0.5, "soft_demand", 1.0)
    assert abs(summarize(tr, 100).var_P - predicted) <= 3 * se


def test_campbell_examples():
    marks = MarkSampler(Dist.uniform(1, 2), sojourn=Dist.const(4))
    m = an.MarkMoments.from_model(marks, rate=1.0, method="quadrature", n_nodes=64)
    mean, var = an.campbell_moments(lambda s, t, x: np.broadcast_to(s / t, x.shape), m, n_x=16)
    assert (mean, var) == (pytest.approx(1.5), pytest.approx(7 / 12))
    mean, var = an.campbell_moments(lambda s, t, x: (x <= s).astype(float), m, n_x=4000)
    assert (mean, var) == (pytest.approx(1.5, rel=1e-3), pytest.approx(1.5, rel=1e-3))
    with pytest.raises(ValueError):
        an.campbell_moments(lambda s, t, x: np.full(x.shape, np.inf), m, n_x=4)


@pytest.mark.parametrize("C,eps", [(1.0, 0.5), (4.0, 0.25), (1.2, 0.16), (INF, 0.3), (0.6, INF)])
def test_campbell_agrees_with_cost_components(C, eps):
    m = dist_ii_moments("monte_carlo", n_samples=20_000, seed=5)
    shape, lower = an.ges_rate_shape(C, eps)
    _, var = an.campbell_moments(shape, m, lower, n_x=8)
    assert var == pytest.approx(an.ges_cost_components(m, C, eps).variance, rel=1e-9)


@pytest.mark.parametrize("C,eps,mode", [(1.0, 0.5, "soft_demand"), (4.0, 0.25, "soft_deadline"),
                                        (1.2, 0.16, "soft_deadline")])
def test_formula_campbell_and_simulation_agree(C, eps, mode):
    marks = MarkSampler(Dist.uniform(1, 3), laxity=Dist.exponential(2), cost_demand=C, cost_deadline=eps)
    model = ArrivalModel.stationary_poisson(1.0, marks, 20000.0)
    formula = an.ges_cost_components(an.MarkMoments.from_model(model, method="quadrature"), C, eps)
    shape, lower = an.ges_rate_shape(C, eps)
    mc = an.MarkMoments.from_model(model, n_samples=200_000, seed=1)
    _, campbell = an.campbell_moments(shape, mc, lower, n_x=8)
    assert campbell == pytest.approx(formula.variance, rel=0.01)
    tr = simulate(sample_arrivals(model, 0), PolicyConfig("ges", mode=mode), 0.02)
    _, se = batch_means_se(tr.P[10000:])
    metrics = summarize(tr, 200)
    assert abs(metrics.var_P - formula.variance) <= 3 * se
    assert abs(metrics.mean_U_rate + metrics.mean_W_rate - formula.unmet - formula.extension) <= 0.05 * formula.total


def test_bound_check_on_exact_run():
    model = ArrivalModel.stationary_poisson(2.0, MarkSampler(Dist.const(3), sojourn=Dist.const(6)), 20000.0)
    jobs = sample_arrivals(model, 0)
    tr = simulate(jobs, PolicyConfig("exact"), 0.1)
    arr = jobs.arrays()
    check = an.centralized_bound_check(arr["arrival"], arr["demand"], tr.P, tr.X, 0.1, burn_in=100)
    assert check.z >= -3
    # (rate * E[sigma^2])^2 / (4 var_X) with var_X near rate * E[sigma^2 tau] / 3 = 36
    assert check.bound == pytest.approx((2 * 9) ** 2 / (4 * 36), rel=0.1)


def test_moment_validation():
    with pytest.raises(ValueError):
        an.MarkMoments.degenerate(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        an.MarkMoments.degenerate(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        an.MarkMoments.from_model(MarkSampler(Dist.const(1), sojourn=Dist.const(2)))
