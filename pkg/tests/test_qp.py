import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import grid_offline, rounding_gap, small_grid_instance
from varsched.engine import simulate, summarize
from varsched.model import ArrivalModel, JobRequest, JobSet, sample_arrivals
from varsched.policies import PolicyConfig
from varsched.qp import (ConvergenceError, ConvergenceWarning, InfeasibleJob, check_valley_filling, kkt_residual,
                         offline_trace, rate_matrix_of, simulate_mpc, solve_blocks, solve_offline, window_caps)


def jobset(rows, horizon=None):
    reqs = [JobRequest(*r) for r in rows]
    return JobSet.build(reqs, horizon=horizon or max(a + t for a, _, t in rows))


def exact_rates(jobs, dt, n_steps):
    arr = jobs.arrays()
    caps = window_caps(arr["arrival"], arr["arrival"] + arr["sojourn"], dt, n_steps)
    return caps * (arr["demand"] / arr["sojourn"])[:, None]


def test_single_job_is_flat():
    rm = solve_offline(jobset([(0, 1, 2)]), 1.0)
    assert np.allclose(rm.rates, [[0.5, 0.5]])
    assert rm.objective() == pytest.approx(0.0, abs=1e-12)
    assert kkt_residual(rm) <= 1e-9


def test_two_job_example():
    rm = solve_offline(jobset([(0, 1, 1), (0, 1, 2)]), 1.0)
    assert np.allclose(rm.rates, [[1, 0], [0, 1]], atol=1e-7)
    assert np.allclose(rm.P, [1, 1], atol=1e-7)
    assert check_valley_filling(rm, 1e-6).passed


@given(st.integers(0, 10_000))
def test_offline_beats_exact(seed):
    rng = np.random.default_rng(seed)
    rows, n_steps = small_grid_instance(rng, max_jobs=6, max_steps=12)
    jobs = jobset(rows, horizon=n_steps)
    rm = solve_offline(jobs, 1.0, tol=1e-10)
    exact = rate_matrix_of(jobs, exact_rates(jobs, 1.0, n_steps), 1.0)
    assert rm.objective() <= exact.objective() + 1e-9


@given(st.integers(0, 10_000))
def test_solution_is_feasible(seed):
    rng = np.random.default_rng(seed)
    rows, n_steps = small_grid_instance(rng, max_jobs=6, max_steps=12)
    jobs = jobset(rows, horizon=n_steps)
    rm = solve_offline(jobs, 1.0, tol=1e-10)
    assert np.all(rm.rates >= 0) and np.all(rm.rates <= rm.caps + 1e-12)
    assert np.allclose(rm.rates.sum(axis=1) * rm.dt, rm.demand, atol=1e-9)
    assert not np.any(rm.rates[rm.caps == 0])


@pytest.mark.parametrize("accelerate", [True, False])
def test_objective_never_increases(accelerate):
    jobs = sample_arrivals(ArrivalModel.distribution_ii(0.3, 2.0, 60.0), 2)
    rm = solve_offline(jobs, 1.0, tol=1e-9, accelerate=accelerate, max_iters=200000)
    h = rm.info.history
    assert len(h) > 3
    assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]).max())


def test_kkt_grows_with_perturbation():
    rm = solve_offline(jobset([(0, 2, 4)]), 1.0, tol=1e-12)
    assert kkt_residual(rm) <= 1e-12
    last = 0.0
    for delta in (0.01, 0.05, 0.2):
        bumped = rate_matrix_of(jobset([(0, 2, 4)]), rm.rates.copy(), 1.0)
        bumped.rates[0, 0] += delta
        bumped.rates[0, 1] -= delta
        r = kkt_residual(bumped)
        assert r > last
        last = r


@given(st.integers(0, 10_000))
def test_solver_contract_on_residual(seed):
    rng = np.random.default_rng(seed)
    rows, n_steps = small_grid_instance(rng, max_jobs=5, max_steps=10)
    rm = solve_offline(jobset(rows, horizon=n_steps), 1.0, tol=1e-8)
    assert kkt_residual(rm) <= 1e-6


@given(st.integers(0, 10_000))
def test_matches_grid_exhaustive_minimum(seed):
    rng = np.random.default_rng(seed)
    rows, n_steps = small_grid_instance(rng)
    jobs = jobset(rows, horizon=n_steps)
    rm = solve_offline(jobs, 1.0, tol=1e-10)
    grid_value, _ = grid_offline(*zip(*rows), 1.0, n_steps)
    value = float(np.sum(rm.P**2))
    assert value <= grid_value + 1e-9
    assert grid_value <= value + rounding_gap(rm.P, (rm.caps > 0).sum(axis=0)) + 1e-9


def test_valley_filling_when_no_box_bound_is_active():
    checked = 0
    for seed in range(40):
        jobs = sample_arrivals(ArrivalModel.distribution_ii(0.3, 2.0, 40.0), seed)
        rm = solve_offline(jobs, 1.0, tol=1e-10)
        at_upper_bound = (rm.caps > 0) & (rm.rates >= rm.caps - 1e-9)
        if at_upper_bound.any():
            continue
        assert check_valley_filling(rm, 1e-5).passed
        checked += 1
    assert checked > 0


def test_valley_filling_flags_immediate_scheduling():
    jobs = jobset([(0, 1, 3), (1, 1, 2)])
    tr = simulate(jobs, PolicyConfig("immediate"), 1.0)
    rates = np.zeros((2, 3))
    rates[0, 0] = 1.0
    rates[1, 1] = 1.0
    assert np.allclose(rates.sum(axis=0), tr.P)
    report = check_valley_filling(rate_matrix_of(jobs, rates, 1.0), 1e-6)
    assert not report.passed
    assert {v[0] for v in report.violations} == {0, 1}


def test_infeasible_job():
    with pytest.raises(InfeasibleJob):
        solve_offline(jobset([(0, 3, 2)], horizon=4), 1.0)


def test_convergence_warning_and_error():
    jobs = sample_arrivals(ArrivalModel.distribution_ii(0.3, 2.0, 60.0), 2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rm = solve_offline(jobs, 1.0, tol=1e-14, max_iters=3)
    assert any(issubclass(w.category, ConvergenceWarning) for w in caught)
    assert not rm.info.converged
    with pytest.raises(ConvergenceError):
        solve_offline(jobs, 1.0, tol=1e-14, max_iters=3, on_fail="raise")


def test_blocks_reject_bad_weights():
    with pytest.raises(ValueError):
        solve_blocks(np.ones((1, 2)), np.ones(2), np.ones(1), np.ones(1), 0.0, 0.0)


def test_mpc_single_job_matches_offline():
    jobs = jobset([(0, 1, 3)])
    mpc = simulate_mpc(jobs, 0.5)
    off, _ = offline_trace(jobs, 0.5)
    assert np.allclose(mpc.P, off.P, atol=1e-8)


def test_mpc_with_all_jobs_at_start_matches_offline():
    jobs = jobset([(0, 1, 1), (0, 1, 2), (0, 0.5, 3)])
    mpc = simulate_mpc(jobs, 0.5, tol=1e-10)
    off, _ = offline_trace(jobs, 0.5, tol=1e-10)
    assert np.allclose(mpc.P, off.P, atol=1e-6)


def test_mpc_sits_between_offline_and_exact():
    jobs = jobset([(0, 1, 3), (1, 1, 2)])
    mpc = summarize(simulate_mpc(jobs, 0.5, tol=1e-10)).var_P
    off = solve_offline(jobs, 0.5, tol=1e-10).objective()
    exact = summarize(simulate(jobs, PolicyConfig("exact"), 0.5)).var_P
    assert off <= mpc + 1e-9
    assert mpc <= exact + 1e-9


def test_mpc_serves_every_job():
    jobs = sample_arrivals(ArrivalModel.distribution_ii(0.3, 2.0, 80.0), 5)
    tr = simulate_mpc(jobs, 1.0)
    total = sum(j.demand for j in jobs)
    assert tr.served.sum() == pytest.approx(total, abs=len(jobs) * 1e-6)
    assert tr.max_rate <= 1.0 + 1e-12


def test_rate_matrix_csv(tmp_path):
    rm = solve_offline(jobset([(0, 1, 2)]), 1.0)
    p = tmp_path / "r.csv"
    rm.write_csv(p)
    assert p.read_text().splitlines() == ["job_index,step_index,rate", "0,0,0.5", "0,1,0.5"]
