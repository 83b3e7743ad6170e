"""Fixed-step simulation of a job set under a rate controller.

Arrivals activate at the first step boundary at or after their arrival time.
A job that stops at its deadline is served at most ``rate * min(dt, x)`` in
the step containing the deadline, so no service ever lands after it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from . import policies as pol
from .model import JobSet
from .policies import (DELAYED, DROP_CHARGE, DROP_STRICT, EDF, EQUAL, ESPC, EXACT, FAIR, GES,
                       GES_UNKNOWN, IMMEDIATE, KEEP_GOING, LLF, SOFT_DEADLINE, SOFT_DEMAND, PolicyConfig)

# job status codes
WAITING, ACTIVE, DONE, DROPPED = 0, 1, 2, 3


class StrictViolation(RuntimeError):
    """A job under a strict policy reached its deadline with demand left."""

    def __init__(self, job: int, remaining: float):
        super().__init__(f"job {job} reached its deadline with {remaining:.6g} unserved")
        self.job = job
        self.remaining = remaining


@njit(cache=True)
def _drop_rule(kind, mode, known, C, eps):
    if kind == GES or (kind == GES_UNKNOWN and known):
        if math.isinf(C) and math.isinf(eps):
            return DROP_STRICT
        if 0.5 * C <= math.sqrt(eps):
            return DROP_CHARGE
        return KEEP_GOING
    if kind == EQUAL or kind == EDF or kind == LLF or kind == FAIR or kind == GES_UNKNOWN:
        if mode == SOFT_DEMAND:
            return DROP_CHARGE
        if mode == SOFT_DEADLINE:
            return KEEP_GOING
    return DROP_STRICT


@njit(cache=True)
def _simulate_kernel(arrival, demand, sojourn, cost_c, cost_e, known,
                     kind, mode, params, dt, n_steps):
    n = arrival.shape[0]
    capacity, c, mu, p_bar, fallback_c = params[0], params[1], params[2], params[3], params[4]
    deadline = arrival + sojourn
    y = demand.copy()
    served = np.zeros(n)
    status = np.zeros(n, dtype=np.int64)
    finish = np.full(n, np.nan)
    past = np.zeros(n, dtype=np.bool_)
    lost = np.zeros(n)  # extra work that no rate <= 1 fits once the window is shortened by snapping
    drop = np.empty(n, dtype=np.int64)
    for k in range(n):
        drop[k] = _drop_rule(kind, mode, known[k], cost_c[k], cost_e[k])

    P = np.zeros(n_steps)
    X = np.zeros(n_steps)
    U = np.zeros(n_steps)
    W = np.zeros(n_steps)
    act = np.empty(n, dtype=np.int64)
    m = 0
    nxt = 0
    u_cum = 0.0
    w_cum = 0.0
    unmet = 0.0
    extension = 0.0
    slack = 0.0
    max_rate = 0.0
    violation = -1
    violation_left = 0.0
    snap = 1e-9 * dt
    rates = np.zeros(n)
    ybuf = np.zeros(n)
    xbuf = np.zeros(n)
    p_prev = p_bar

    for i in range(n_steps):
        t = i * dt
        while nxt < n and arrival[nxt] <= t + snap:
            act[m] = nxt
            status[nxt] = ACTIVE
            lost[nxt] = max(0.0, demand[nxt] - (deadline[nxt] - t)) - max(0.0, demand[nxt] - sojourn[nxt])
            m += 1
            nxt += 1

        xsum = 0.0
        for q in range(m):
            k = act[q]
            ybuf[q] = y[k]
            xbuf[q] = deadline[k] - t
            xsum += y[k]
        X[i] = xsum

        # rates
        if kind == EDF or kind == LLF:
            pol._priority(ybuf[:m], xbuf[:m], capacity, 0 if kind == EDF else 1, mode, rates[:m])
        elif kind == FAIR:
            pol._fair(ybuf[:m], xbuf[:m], capacity, mode, rates[:m])
        else:
            for q in range(m):
                k = act[q]
                yy = ybuf[q]
                xx = xbuf[q]
                if kind == EXACT:
                    r = pol._exact(yy, xx)
                elif kind == IMMEDIATE:
                    r = pol._immediate(yy)
                elif kind == DELAYED:
                    r = pol._delayed(yy, xx, dt)
                elif kind == GES:
                    r = pol._ges(yy, xx, cost_c[k], cost_e[k])
                elif kind == EQUAL:
                    r = pol._equal(yy, xx, mode, c, dt)
                elif kind == ESPC:
                    r = pol._espc(yy, xx, p_prev, p_bar, mu)
                else:  # GES_UNKNOWN
                    if known[k]:
                        r = pol._ges(yy, xx, cost_c[k], cost_e[k])
                    elif mode == SOFT_DEADLINE:
                        r = pol.clamp_rate(fallback_c) if yy > 0.0 else 0.0
                    else:
                        r = pol.clamp_rate(fallback_c) if (yy > 0.0 and xx > 0.0) else 0.0
                rates[q] = r

        # service and deadline bookkeeping
        total = 0.0
        for q in range(m):
            k = act[q]
            xx = xbuf[q]
            r = rates[q]
            if r > 0.0 and y[k] > 0.0:
                span = dt
                if drop[k] != KEEP_GOING and xx < dt:
                    span = max(xx, 0.0)
                s = min(r * span, y[k])
                if s > 0.0:
                    y[k] -= s
                    served[k] += s
                    total += s
                    if s / dt > max_rate:
                        max_rate = s / dt
                    if y[k] <= 1e-12 * max(1.0, demand[k]):
                        served[k] += y[k]
                        total += y[k]
                        y[k] = 0.0
                        status[k] = DONE
                        done_at = t + s / r
                        finish[k] = done_at
                        late = done_at - deadline[k]
                        if late > 1e-9 * max(dt, 1.0):
                            extension += late
                            if cost_e[k] > 0.0:
                                w_cum += cost_e[k] * late
            if status[k] == ACTIVE and not past[k] and xx <= dt + snap:
                past[k] = True
                left = y[k]
                rule = drop[k]
                if rule == DROP_CHARGE and math.isinf(cost_c[k]):
                    rule = DROP_STRICT
                if left <= 1e-12 * max(1.0, demand[k]):
                    served[k] += left
                    total += left
                    y[k] = 0.0
                    status[k] = DONE
                    finish[k] = deadline[k]
                elif rule == DROP_STRICT:
                    if left > dt * (1.0 + 1e-9) and violation < 0:
                        violation = k
                        violation_left = left
                    slack += left
                    status[k] = DROPPED
                elif rule == DROP_CHARGE:
                    # snapping loss is slack, as for strict policies; only the rest is a choice
                    forced = min(left, lost[k])
                    slack += forced
                    charged = left - forced
                    unmet += charged
                    if cost_c[k] > 0.0 and charged > 0.0:
                        u_cum += cost_c[k] * charged
                    status[k] = DROPPED
        P[i] = total / dt
        p_prev = P[i]
        U[i] = u_cum
        W[i] = w_cum
        if violation >= 0:
            break

        # compact the active list, preserving arrival order
        w = 0
        for q in range(m):
            k = act[q]
            if status[k] == ACTIVE:
                act[w] = k
                w += 1
        m = w

    overflow = 0
    for q in range(m):
        if status[act[q]] == ACTIVE and y[act[q]] > 0.0:
            overflow += 1
    stats = np.array([unmet, extension, slack, max_rate, float(overflow), float(violation), violation_left])
    return P, X, U, W, served, finish, status, stats


@dataclass
class CapacityTrace:
    dt: float
    P: np.ndarray
    X: np.ndarray
    U_cum: np.ndarray
    W_cum: np.ndarray
    served: np.ndarray  # per job, in job-set order
    finish: np.ndarray  # completion time per job (NaN if never completed)
    status: np.ndarray
    total_unmet: float = 0.0
    total_extension: float = 0.0
    strict_slack: float = 0.0  # leftover below one step of work, from arrival snapping
    max_rate: float = 0.0
    overflow: int = 0  # jobs still unfinished at the horizon
    label: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self.P)) * self.dt

    @property
    def duration(self) -> float:
        return len(self.P) * self.dt

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "P", "X", "U_cum", "W_cum"])
            for row in zip(self.t, self.P, self.X, self.U_cum, self.W_cum):
                w.writerow([repr(float(v)) for v in row])


def n_steps_for(horizon: float, dt: float) -> int:
    return max(0, int(math.ceil(horizon / dt - 1e-9)))


def simulate(jobs: JobSet, policy: PolicyConfig, dt: float, horizon: float | None = None,
             p_bar: float | None = None) -> CapacityTrace:
    """Run ``policy`` on ``jobs`` with step ``dt`` over ``[0, horizon)``.

    ``p_bar`` feeds ES-PC when the policy config leaves it unset.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    T = jobs.horizon if horizon is None else horizon
    n_steps = n_steps_for(T, dt)
    arr = jobs.arrays()
    if policy.kind == "espc" and policy.p_bar is None and p_bar is None:
        raise ValueError("ES-PC needs a target capacity p_bar")
    params = policy.params(0.0 if p_bar is None else float(p_bar))
    P, X, U, W, served, finish, status, stats = _simulate_kernel(
        arr["arrival"], arr["demand"], arr["sojourn"], arr["cost_demand"], arr["cost_deadline"],
        arr["known"], policy.code, pol.mode_code(policy.mode), params, float(dt), n_steps)
    violation = int(stats[5])
    if violation >= 0:
        raise StrictViolation(violation, float(stats[6]))
    return CapacityTrace(dt, P, X, U, W, served, finish, status,
                         total_unmet=float(stats[0]), total_extension=float(stats[1]),
                         strict_slack=float(stats[2]), max_rate=float(stats[3]),
                         overflow=int(stats[4]), label=policy.label)


def simulate_es_pc(jobs: JobSet, dt: float, mu: float, p_bar: float,
                   horizon: float | None = None) -> CapacityTrace:
    return simulate(jobs, PolicyConfig("espc", mu=mu, p_bar=p_bar), dt, horizon)


def trace_from_rates(jobs: JobSet, rates: np.ndarray, dt: float, label: str = "") -> CapacityTrace:
    """Capacity trace of a precomputed rate matrix (jobs x steps)."""
    arr = jobs.arrays()
    n_steps = rates.shape[1]
    P = rates.sum(axis=0) if len(jobs) else np.zeros(n_steps)
    cum = np.cumsum(rates, axis=1) * dt
    start = cum - rates * dt  # served before each step
    t = np.arange(n_steps) * dt
    present = (arr["arrival"][:, None] <= t[None, :] + 1e-9 * dt)
    remaining = np.clip(arr["demand"][:, None] - start, 0.0, None)
    X = np.where(present, remaining, 0.0).sum(axis=0) if len(jobs) else np.zeros(n_steps)
    served = cum[:, -1] if n_steps else np.zeros(len(jobs))
    zeros = np.zeros(n_steps)
    status = np.full(len(jobs), DONE)
    return CapacityTrace(dt, P, X, zeros, zeros.copy(), served, np.full(len(jobs), np.nan), status,
                         max_rate=float(rates.max(initial=0.0)), label=label)


@dataclass(frozen=True)
class Metrics:
    mean_P: float
    var_P: float
    var_X: float
    mean_X: float
    mean_U_rate: float
    mean_W_rate: float
    total_unmet: float
    total_extension: float
    window: float
    n_samples: int

    def objective(self, alpha: float = 0.0, beta: float = 1.0, costs: bool = True) -> float:
        value = alpha * self.mean_P**2 + beta * self.var_P
        if costs:
            value += self.mean_U_rate + self.mean_W_rate
        return value

    @property
    def cost(self) -> float:
        return self.objective(0.0, 1.0, True)

    def as_dict(self) -> dict[str, float]:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["cost"] = self.cost
        return out


def summarize(trace: CapacityTrace, burn_in: float = 0.0) -> Metrics:
    """Moments over samples with ``t >= burn_in``."""
    first = int(math.ceil(burn_in / trace.dt - 1e-9))
    P = trace.P[first:]
    if len(P) == 0:
        raise ValueError("no samples after burn-in")
    X = trace.X[first:]
    window = len(P) * trace.dt
    u0 = trace.U_cum[first - 1] if first > 0 else 0.0
    w0 = trace.W_cum[first - 1] if first > 0 else 0.0
    return Metrics(
        mean_P=float(P.mean()), var_P=float(P.var()), var_X=float(X.var()), mean_X=float(X.mean()),
        mean_U_rate=float((trace.U_cum[-1] - u0) / window), mean_W_rate=float((trace.W_cum[-1] - w0) / window),
        total_unmet=trace.total_unmet, total_extension=trace.total_extension,
        window=window, n_samples=len(P),
    )


def empirical_ratio(candidate, baseline: float) -> float:
    if not baseline > 0:
        raise ValueError("baseline cost must be > 0")
    value = candidate.cost if isinstance(candidate, Metrics) else float(candidate)
    return value / baseline


def default_burn_in(jobs: JobSet) -> float:
    if len(jobs) == 0:
        return 0.0
    return 10.0 * float(np.mean([j.sojourn for j in jobs]))


def batch_means_se(series: np.ndarray, n_batches: int = 50) -> tuple[float, float]:
    """Standard errors of the mean and of the variance via batch means."""
    n = len(series) // n_batches * n_batches
    if n == 0:
        return math.nan, math.nan
    b = series[:n].reshape(n_batches, -1)
    mu = series[:n].mean()
    means = b.mean(axis=1)
    var_b = ((b - mu) ** 2).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches)), float(var_b.std(ddof=1) / math.sqrt(n_batches))
