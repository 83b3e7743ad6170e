"""Offline optimum, MPC, and optimality checks for minimum-variance schedules.

The solver core handles the family

    minimize   sum_j len_j * [alpha * E_j**2 + beta * sum_b m_b * V[b, j]**2]
    E_j      = sum_b m_b * V[b, j]
    s.t.       sum_j len_j * V[b, j] = s_b,   0 <= V[b, j] <= cap[b, j]

which covers the offline problem (m = 1, len = dt, alpha = 1, beta = 0) and
the fluid class-profile problem. Projected gradient runs in the metric
diag(m_b * len_j), so each block projection is a clip of ``z - mu`` with the
scalar ``mu`` located by bisection over the sorted breakpoints.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .engine import CapacityTrace, StrictViolation, n_steps_for, trace_from_rates
from .model import JobSet


class ConvergenceWarning(RuntimeWarning):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"no convergence after {iterations} iterations (KKT residual {residual:.3g})")
        self.residual = residual
        self.iterations = iterations


class ConvergenceError(RuntimeError):
    pass


class InfeasibleJob(ValueError):
    pass


# ---------------------------------------------------------------- kernels


@njit(cache=True)
def _mass_in(z, cap, length, mu, lo, hi):
    s = 0.0
    for j in range(lo, hi):
        v = z[j] - mu
        if v > cap[j]:
            v = cap[j]
        if v > 0.0:
            s += length[j] * v
    return s


@njit(cache=True)
def project_block(z, cap, length, target, lo, hi, out):
    """Euclidean projection of ``z[lo:hi]`` onto {0 <= v <= cap, sum(length*v) = target}."""
    for j in range(out.shape[0]):
        out[j] = 0.0
    if target <= 0.0 or hi <= lo:
        return
    full = 0.0
    for j in range(lo, hi):
        full += length[j] * cap[j]
    if target >= full:
        for j in range(lo, hi):
            out[j] = cap[j]
        return
    n = hi - lo
    bp = np.empty(2 * n)
    for q in range(n):
        j = lo + q
        bp[2 * q] = z[j] - cap[j]
        bp[2 * q + 1] = z[j]
    bp.sort()
    # mass is non-increasing in mu; find adjacent breakpoints bracketing target
    a, b = 0, 2 * n - 1
    while b - a > 1:
        mid = (a + b) // 2
        if _mass_in(z, cap, length, bp[mid], lo, hi) >= target:
            a = mid
        else:
            b = mid
    ga = _mass_in(z, cap, length, bp[a], lo, hi)
    gb = _mass_in(z, cap, length, bp[b], lo, hi)
    if ga == gb:
        mu = bp[a]
    else:
        mu = bp[a] + (ga - target) * (bp[b] - bp[a]) / (ga - gb)
    for j in range(lo, hi):
        v = z[j] - mu
        if v > cap[j]:
            v = cap[j]
        if v < 0.0:
            v = 0.0
        out[j] = v


@njit(cache=True)
def _expected(V, mass, lo, hi, E):
    for j in range(E.shape[0]):
        E[j] = 0.0
    for b in range(V.shape[0]):
        for j in range(lo[b], hi[b]):
            E[j] += mass[b] * V[b, j]


@njit(cache=True)
def _objective(V, mass, length, alpha, beta, lo, hi, E):
    _expected(V, mass, lo, hi, E)
    f = 0.0
    for j in range(E.shape[0]):
        f += alpha * length[j] * E[j] * E[j]
    if beta != 0.0:
        for b in range(V.shape[0]):
            for j in range(lo[b], hi[b]):
                f += beta * length[j] * mass[b] * V[b, j] * V[b, j]
    return f


@njit(cache=True)
def _kkt(V, cap, mass, alpha, beta, lo, hi, E, atol):
    _expected(V, mass, lo, hi, E)
    worst = 0.0
    for b in range(V.shape[0]):
        up = -np.inf  # largest marginal among cells that could give service away
        down = np.inf  # smallest marginal among cells that could take more
        for j in range(lo[b], hi[b]):
            c = cap[b, j]
            if c <= 0.0:
                continue
            h = alpha * E[j] + beta * V[b, j]
            v = V[b, j]
            if v > atol:
                up = max(up, h)
            if v < c - atol:
                down = min(down, h)
        gap = 0.5 * (up - down)
        if gap > worst:
            worst = gap
    return worst


@njit(cache=True)
def _solve(V0, cap, length, mass, demand, alpha, beta, lo, hi, tol, max_iters, accelerate, history):
    B, J = V0.shape
    E = np.zeros(J)
    conc = np.zeros(J)
    for b in range(B):
        for j in range(lo[b], hi[b]):
            if cap[b, j] > 0.0:
                conc[j] += mass[b]
    L = 2.0 * alpha * conc.max() + 2.0 * beta if J > 0 else 1.0
    if L <= 0.0:
        L = 1.0
    atol = 1e-12
    X = np.zeros((B, J))
    row = np.zeros(J)
    for b in range(B):
        project_block(V0[b], cap[b], length, demand[b], lo[b], hi[b], row)
        X[b, :] = row
    fx = _objective(X, mass, length, alpha, beta, lo, hi, E)
    history[0] = fx
    res = _kkt(X, cap, mass, alpha, beta, lo, hi, E, atol)
    if res <= tol:
        return X, 0, res
    Y = X.copy()
    Z = np.zeros((B, J))
    Xold = X.copy()
    tk = 1.0
    plain = True  # Y == X: the step is a plain projected-gradient step
    it = 0
    while it < max_iters:
        it += 1
        _expected(Y, mass, lo, hi, E)
        for b in range(B):
            for j in range(lo[b], hi[b]):
                row[j] = Y[b, j] - (2.0 * alpha * E[j] + 2.0 * beta * Y[b, j]) / L
            project_block(row, cap[b], length, demand[b], lo[b], hi[b], Z[b])
        fz = _objective(Z, mass, length, alpha, beta, lo, hi, E)
        Xold[:, :] = X
        # a plain step from X descends in exact arithmetic; accept it even if
        # rounding says otherwise so the iterate cannot freeze
        restart = fz > fx and not plain
        if not restart:
            X[:, :] = Z
            fx = min(fz, fx) if plain else fz
        history[it] = fx
        if accelerate and restart:
            # adaptive restart: drop momentum when the extrapolated step fails
            tk = 1.0
            Y[:, :] = X
            plain = True
        elif accelerate:
            plain = False
            tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
            for b in range(B):
                for j in range(lo[b], hi[b]):
                    Y[b, j] = X[b, j] + (tk / tn) * (Z[b, j] - X[b, j]) + ((tk - 1.0) / tn) * (X[b, j] - Xold[b, j])
            tk = tn
        else:
            Y[:, :] = X
        res = _kkt(X, cap, mass, alpha, beta, lo, hi, E, atol)
        if res <= tol:
            break
    return X, it, res


# ---------------------------------------------------------------- problem wrapper


@dataclass
class SolverInfo:
    iterations: int
    residual: float
    converged: bool
    history: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def solve_blocks(cap: np.ndarray, length: np.ndarray, mass: np.ndarray, demand: np.ndarray,
                 alpha: float, beta: float, tol: float = 1e-8, max_iters: int = 20000,
                 V0: np.ndarray | None = None, accelerate: bool = True,
                 on_fail: str = "warn") -> tuple[np.ndarray, SolverInfo]:
    """Projected-gradient solve of the block problem described in the module docstring."""
    cap = np.ascontiguousarray(cap, dtype=float)
    B, J = cap.shape
    length = np.ascontiguousarray(length, dtype=float)
    mass = np.ascontiguousarray(mass, dtype=float)
    demand = np.ascontiguousarray(demand, dtype=float)
    if alpha < 0 or beta < 0 or (alpha == 0 and beta == 0):
        raise ValueError("need alpha, beta >= 0, not both zero")
    support = cap > 0
    lo = np.where(support.any(axis=1), support.argmax(axis=1), 0).astype(np.int64)
    hi = np.where(support.any(axis=1), J - support[:, ::-1].argmax(axis=1), 0).astype(np.int64)
    room = (cap * length[None, :]).sum(axis=1)
    short = np.nonzero(demand > room * (1 + 1e-9) + 1e-12)[0]
    if len(short):
        b = int(short[0])
        raise InfeasibleJob(f"block {b} needs {demand[b]:.6g} but its window holds {room[b]:.6g}")
    demand = np.minimum(demand, room)
    if V0 is None:
        V0 = np.where(support, (demand / np.where(room > 0, room, 1.0))[:, None] * cap, 0.0)
    history = np.full(max_iters + 1, np.nan)
    V, its, res = _solve(np.ascontiguousarray(V0, dtype=float), cap, length, mass, demand,
                         float(alpha), float(beta), lo, hi, float(tol), int(max_iters), bool(accelerate), history)
    info = SolverInfo(int(its), float(res), bool(res <= tol), history[: its + 1])
    if not info.converged:
        if on_fail == "raise":
            raise ConvergenceError(str(ConvergenceWarning(res, its)))
        warnings.warn(ConvergenceWarning(res, its), stacklevel=2)
    return V, info


def block_kkt(V: np.ndarray, cap: np.ndarray, mass: np.ndarray, alpha: float, beta: float) -> float:
    support = cap > 0
    J = cap.shape[1]
    lo = np.where(support.any(axis=1), support.argmax(axis=1), 0).astype(np.int64)
    hi = np.where(support.any(axis=1), J - support[:, ::-1].argmax(axis=1), 0).astype(np.int64)
    return float(_kkt(np.ascontiguousarray(V, float), np.ascontiguousarray(cap, float),
                      np.ascontiguousarray(mass, float), float(alpha), float(beta), lo, hi, np.zeros(J), 1e-12))


# ---------------------------------------------------------------- rate matrices


def window_caps(arrival: np.ndarray, deadline: np.ndarray, dt: float, n_steps: int,
                t0: float = 0.0) -> np.ndarray:
    """Fraction of each step ``[t0 + i dt, t0 + (i+1) dt)`` inside each job's window."""
    left = t0 + np.arange(n_steps) * dt
    overlap = np.minimum(left[None, :] + dt, deadline[:, None]) - np.maximum(left[None, :], arrival[:, None])
    caps = np.clip(overlap / dt, 0.0, 1.0)
    caps[caps < 1e-12] = 0.0
    return caps


@dataclass
class RateMatrix:
    dt: float
    rates: np.ndarray  # jobs x steps; zero outside each job's window
    caps: np.ndarray
    demand: np.ndarray
    info: SolverInfo | None = None

    @property
    def P(self) -> np.ndarray:
        return self.rates.sum(axis=0)

    @property
    def n_steps(self) -> int:
        return self.rates.shape[1]

    def objective(self) -> float:
        """Time-averaged variance of P over the matrix horizon."""
        P = self.P
        return float(np.mean(P**2) - np.mean(P) ** 2) if len(P) else 0.0

    def sum_of_squares(self) -> float:
        return float(np.sum(self.P**2) * self.dt)

    def job_rates(self, k: int) -> np.ndarray:
        idx = np.nonzero(self.caps[k] > 0)[0]
        return self.rates[k, idx[0]: idx[-1] + 1] if len(idx) else np.zeros(0)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["job_index", "step_index", "rate"])
            for k, i in zip(*np.nonzero(self.caps > 0)):
                w.writerow([int(k), int(i), repr(float(self.rates[k, i]))])


def rate_matrix_of(jobs: JobSet, rates: np.ndarray, dt: float) -> RateMatrix:
    arr = jobs.arrays()
    caps = window_caps(arr["arrival"], arr["arrival"] + arr["sojourn"], dt, rates.shape[1])
    return RateMatrix(dt, rates, caps, arr["demand"])


def solve_offline(jobs: JobSet, dt: float, tol: float = 1e-8, max_iters: int = 50000,
                  horizon: float | None = None, accelerate: bool = True, on_fail: str = "warn") -> RateMatrix:
    """Minimum sum of squared capacity subject to every job finishing inside its window."""
    T = jobs.horizon if horizon is None else horizon
    n_steps = n_steps_for(T, dt)
    arr = jobs.arrays()
    bad = np.nonzero(arr["demand"] > arr["sojourn"] * (1 + 1e-12))[0]
    if len(bad):
        raise InfeasibleJob(f"job {int(bad[0])} has demand above its sojourn time")
    caps = window_caps(arr["arrival"], arr["arrival"] + arr["sojourn"], dt, n_steps)
    n = len(jobs)
    if n == 0:
        return RateMatrix(dt, np.zeros((0, n_steps)), caps, arr["demand"], SolverInfo(0, 0.0, True))
    V, info = solve_blocks(caps, np.full(n_steps, dt), np.ones(n), arr["demand"], 1.0, 0.0,
                           tol, max_iters, accelerate=accelerate, on_fail=on_fail)
    return RateMatrix(dt, V, caps, arr["demand"], info)


def kkt_residual(rm: RateMatrix) -> float:
    """Largest stationarity/complementarity gap of ``rm`` for min sum P**2 (0 at the optimum)."""
    return block_kkt(rm.rates, rm.caps, np.ones(rm.rates.shape[0]), 1.0, 0.0)


@dataclass
class ValleyReport:
    passed: bool
    violations: list[tuple[int, str, str]]


def check_valley_filling(rm: RateMatrix, tol: float = 1e-6) -> ValleyReport:
    """Capacity is level wherever a job is partially served and no lower where it is idle."""
    P = rm.P
    out: list[tuple[int, str, str]] = []
    atol = 1e-12
    for k in range(rm.rates.shape[0]):
        window = np.nonzero(rm.caps[k] > 0)[0]
        if len(window) == 0:
            continue
        r = rm.rates[k, window]
        c = rm.caps[k, window]
        interior = (r > atol) & (r < c - atol)
        served = r > atol
        idle = ~served
        if interior.any():
            spread = P[window][interior].max() - P[window][interior].min()
            if spread > tol:
                out.append((k, "level", f"capacity varies by {spread:.3g} over partially served steps"))
        if served.any() and idle.any():
            top = P[window][served].max()
            low = P[window][idle].min()
            if low < top - tol:
                out.append((k, "valley", f"idle step has capacity {low:.6g} below served level {top:.6g}"))
    return ValleyReport(not out, out)


def simulate_mpc(jobs: JobSet, dt: float, tol: float = 1e-8, max_iters: int = 50000,
                 horizon: float | None = None, on_fail: str = "warn") -> CapacityTrace:
    """Receding-horizon optimum over jobs present now; apply the first step, repeat."""
    T = jobs.horizon if horizon is None else horizon
    n_steps = n_steps_for(T, dt)
    arr = jobs.arrays()
    a = arr["arrival"]
    d = a + arr["sojourn"]
    sigma = arr["demand"]
    n = len(jobs)
    y = sigma.copy()
    served = np.zeros(n)
    status = np.zeros(n, dtype=np.int64)
    P = np.zeros(n_steps)
    X = np.zeros(n_steps)
    plan: dict[int, np.ndarray] = {}
    snap = 1e-9 * dt
    slack = 0.0
    max_rate = 0.0
    iterations = 0
    nxt = 0
    active: list[int] = []
    for i in range(n_steps):
        t = i * dt
        while nxt < n and a[nxt] <= t + snap:
            active.append(nxt)
            status[nxt] = 1
            nxt += 1
        X[i] = float(sum(y[k] for k in active))
        if not active:
            continue
        idx = np.array(active, dtype=np.int64)
        J = int(math.ceil((d[idx].max() - t) / dt - 1e-9))
        caps = window_caps(np.full(len(idx), t), d[idx], dt, J, t0=t)
        room = caps.sum(axis=1) * dt
        want = np.minimum(y[idx], room)
        V0 = np.zeros((len(idx), J))
        for q, k in enumerate(idx):
            tail = plan.get(int(k))
            if tail is not None and len(tail) >= 1:
                m = min(len(tail), J)
                V0[q, :m] = tail[:m]
            elif room[q] > 0:
                V0[q] = caps[q] * want[q] / room[q]
        V, info = solve_blocks(caps, np.full(J, dt), np.ones(len(idx)), want, 1.0, 0.0,
                               tol, max_iters, V0=V0, on_fail=on_fail)
        iterations += info.iterations
        total = 0.0
        keep: list[int] = []
        for q, k in enumerate(idx):
            s = min(V[q, 0] * dt, y[k])
            y[k] -= s
            served[k] += s
            total += s
            max_rate = max(max_rate, s / dt)
            plan[int(k)] = V[q, 1:]
            finished = y[k] <= 1e-12 * max(1.0, sigma[k])
            at_deadline = d[k] - t <= dt + snap
            if finished:
                served[k] += y[k]
                total += y[k]
                y[k] = 0.0
                status[k] = 2
            elif at_deadline:
                if y[k] > dt * (1 + 1e-9):
                    raise StrictViolation(int(k), float(y[k]))
                slack += y[k]
                status[k] = 3
            else:
                keep.append(int(k))
        P[i] = total / dt
        active = keep
    zeros = np.zeros(n_steps)
    return CapacityTrace(dt, P, X, zeros, zeros.copy(), served, np.full(n, np.nan), status,
                         strict_slack=slack, max_rate=max_rate, label="mpc",
                         extras={"iterations": iterations})


def offline_trace(jobs: JobSet, dt: float, tol: float = 1e-8, max_iters: int = 50000,
                  horizon: float | None = None, on_fail: str = "warn") -> tuple[CapacityTrace, RateMatrix]:
    rm = solve_offline(jobs, dt, tol, max_iters, horizon, on_fail=on_fail)
    tr = trace_from_rates(jobs, rm.rates, dt, label="offline")
    tr.extras["iterations"] = rm.info.iterations if rm.info else 0
    return tr, rm
