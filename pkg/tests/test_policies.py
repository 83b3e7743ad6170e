import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ges_choice, ges_integrand, grid_min_2d
from varsched.model import JobRequest, JobState
from varsched.policies import (PolicyConfig, assign_fair, assign_priority, parse_policy, rate_delayed, rate_equal_service,
                               rate_es_pc, rate_exact, rate_ges, rate_ges_unknown, rate_immediate)

INF = math.inf
finite = st.floats(-50, 50, allow_nan=False)
nonneg = st.floats(0, 50, allow_nan=False)
cost = st.one_of(st.floats(0, 20, allow_nan=False), st.just(INF))


def state(y, x, known=True):
    """A JobState whose remaining demand and time are exactly (y, x) at t=0."""
    req = JobRequest(0.0, y, max(x, y), known=known)
    return JobState(req, remaining_demand=y, remaining_time=x)


@pytest.mark.parametrize("y,x,want", [(4, 2, 1.0), (1, 4, 0.25), (3, 0, 0.0)])
def test_exact_examples(y, x, want):
    assert rate_exact(y, x) == want


@pytest.mark.parametrize("y,x,C,eps,want", [(3, 1, 2, 4, 1.0), (1, 2, 2, 4, 0.5), (1, 0, 10, 0.25, 0.5)])
def test_ges_examples(y, x, C, eps, want):
    assert rate_ges(y, x, C, eps) == want


def test_immediate_and_delayed_examples():
    assert rate_immediate(0.5) == 1.0
    assert rate_immediate(0.0) == 0.0
    assert rate_delayed(1, 3) == 0.0
    assert rate_delayed(1, 1) == 1.0


def test_delayed_step_rule_keeps_laxity_nonnegative():
    # laxity 0.4 within a step of 1: serve 0.6 so end-of-step laxity is 0
    assert rate_delayed(1.0, 1.4, dt=1.0) == pytest.approx(0.6)
    assert rate_delayed(1.0, 3.0, dt=1.0) == 0.0


@pytest.mark.parametrize("mode,y,x,want", [("strict", 1, 3, 0.4), ("strict", 1, 1, 1.0), ("soft_demand", 1, 0, 0.0),
                                           ("soft_deadline", 1, 0, 0.4), ("soft_demand", 0, 3, 0.0)])
def test_equal_service_examples(mode, y, x, want):
    assert rate_equal_service(y, x, mode, 0.4) == want


@pytest.mark.parametrize("p_prev,want", [(0.3, 0.75), (0.6, 0.5)])
def test_es_pc_examples(p_prev, want):
    assert rate_es_pc(2, 4, p_prev, 0.5, 1.5) == want


def test_es_pc_past_deadline():
    assert rate_es_pc(2, 0, 0.0, 10.0, 3.0) == 0.0


def test_priority_examples():
    jobs = [state(1, 1), state(1, 2)]
    assert assign_priority(jobs, 1.0) == {0: 1.0, 1: 0.0}
    assert assign_priority(jobs, 1.5) == {0: 1.0, 1: 0.5}
    llf = [state(1, 3), state(2, 3)]
    assert assign_priority(llf, 1.0, order="laxity") == {0: 0.0, 1: 1.0}


def test_priority_ties_follow_input_order():
    jobs = [state(1, 2), state(1, 2), state(1, 2)]
    assert assign_priority(jobs, 1.5) == {0: 1.0, 1: 0.5, 2: 0.0}


def test_priority_eligibility_by_mode():
    jobs = [state(1, 0), state(1, 2)]
    assert assign_priority(jobs, 2.0, mode="soft_demand") == {1: 1.0}
    assert assign_priority(jobs, 2.0, mode="soft_deadline") == {0: 1.0, 1: 1.0}


def test_fair_examples():
    assert assign_fair([state(1, 2), state(1, 3)], 1.0) == {0: 0.5, 1: 0.5}
    assert assign_fair([state(1, 2)], 3.0) == {0: 1.0}
    assert assign_fair([], 3.0) == {}
    assert assign_fair([state(0, 2)], 3.0) == {}


def test_ges_unknown_examples():
    assert rate_ges_unknown(state(1, 2), 2.0, 4.0, 0.3) == rate_ges(1, 2, 2.0, 4.0)
    assert rate_ges_unknown(state(1, 2, known=False), 2.0, 4.0, 0.3) == 0.3
    assert rate_ges_unknown(state(0, 2, known=False), 2.0, 4.0, 0.3) == 0.0


def test_negative_parameters_rejected():
    with pytest.raises(ValueError):
        rate_es_pc(1, 1, 0, 0, 0.5)
    with pytest.raises(ValueError):
        assign_fair([], -1.0)
    with pytest.raises(ValueError):
        PolicyConfig("equal", c=-0.1)
    with pytest.raises(ValueError):
        PolicyConfig("nope")


def test_every_rate_lies_in_unit_interval_on_a_million_inputs():
    from varsched import policies as pol
    rng = np.random.default_rng(0)
    n = 1_000_000
    y = rng.uniform(-5, 50, n)
    x = rng.uniform(-5, 50, n)
    C = np.where(rng.random(n) < 0.1, INF, rng.exponential(3, n))
    eps = np.where(rng.random(n) < 0.1, INF, rng.exponential(3, n))
    dt = rng.choice([0.0, 0.1, 1.0], n)
    out = np.empty((5, n))
    for i in range(n):
        out[0, i] = pol._exact(y[i], x[i])
        out[1, i] = pol._ges(y[i], x[i], C[i], eps[i])
        out[2, i] = pol._delayed(y[i], x[i], dt[i])
        out[3, i] = pol._equal(y[i], x[i], i % 3, C[i], dt[i])
        out[4, i] = pol._espc(y[i], x[i], x[i], y[i], 1.0 + eps[i] if eps[i] < INF else 2.0)
    assert np.all((out >= 0) & (out <= 1))


@given(finite, finite)
def test_ges_at_infinite_costs_equals_exact(y, x):
    assert rate_ges(max(y, 0), x, INF, INF) == rate_exact(max(y, 0), x)


@given(nonneg, cost, cost)
def test_ges_serves_past_deadline_only_when_extending(y, C, eps):
    r = rate_ges(y, 0.0, C, eps)
    if y > 0 and math.sqrt(eps) < C / 2:
        assert r > 0 or eps == 0
    else:
        assert r == 0


@given(st.floats(0.01, 20), st.floats(0.01, 20), cost, cost)
def test_ges_caps_at_half_c_only_in_the_drop_regime(y, x, C, eps):
    r = rate_ges(y, x, C, eps)
    raw = y / x
    if raw <= min(C / 2, math.sqrt(eps)):
        assert r == min(raw, 1.0)
    elif C / 2 <= math.sqrt(eps):
        assert r == min(C / 2, 1.0)
    else:
        assert r == min(math.sqrt(eps), 1.0)


@given(st.floats(0.1, 5), st.floats(1, 3), st.floats(0.05, 10), st.floats(0.05, 10))
def test_ges_choice_is_pointwise_optimal(sigma, stretch, C, eps):
    tau = sigma * stretch
    s_hat, t_hat = ges_choice(sigma, tau, C, eps)
    got = ges_integrand(s_hat, t_hat, sigma, tau, C, eps)
    best, gap = grid_min_2d(sigma, tau, C, eps, n=120)
    assert got <= best + 1e-9
    assert got >= best - gap - 1e-9


def test_ges_rate_reproduces_choice():
    # stepping the rate rule in continuous time yields the chosen (served, duration) pair
    for sigma, tau, C, eps in [(3, 2, 2, 4), (3, 2, 10, 0.25), (1, 2, 5, 5)]:
        s_hat, t_hat = ges_choice(sigma, tau, C, eps)
        r = rate_ges(sigma, tau, C, eps)
        assert r == pytest.approx(s_hat / t_hat) or r == 1.0


def test_parse_policy():
    cfg = parse_policy("equal:c=0.6,mode=strict")
    assert (cfg.kind, cfg.c, cfg.mode) == ("equal", 0.6, "strict")
    assert cfg.label == "equal(c=0.6,strict)"
    assert parse_policy("edf:p=4,mode=soft_demand").capacity == 4.0
    assert parse_policy("espc:mu=1.2").label == "espc(mu=1.2)"
    assert parse_policy("exact").label == "exact"
    with pytest.raises(ValueError):
        parse_policy("equal:bogus=1")
