"""Fluid (expected-value) instances: the max-stability allocation and its QP oracle.

A fluid instance is a finite set of job classes ``(arrival, demand, sojourn,
mass)`` where ``mass`` is the expected number of jobs in the class. A policy is
a per-class rate profile, piecewise constant on the grid of breakpoints, and
the expected capacity is ``E[P] = sum(mass * rate)`` per cell.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .qp import SolverInfo, solve_blocks


class FluidError(ValueError):
    pass


class FluidInfeasible(FluidError):
    """The max-stability loop stranded a class; carries the class and interval."""

    def __init__(self, class_index: int, t1: float, t2: float, detail: str):
        super().__init__(f"class {class_index} cannot be scheduled in [{t1:g}, {t2:g}): {detail}")
        self.class_index = class_index
        self.interval = (t1, t2)


@dataclass(frozen=True)
class FluidClass:
    arrival: float
    demand: float
    sojourn: float
    mass: float = 1.0

    @property
    def deadline(self) -> float:
        return self.arrival + self.sojourn


@dataclass(frozen=True)
class FluidInstance:
    classes: tuple[FluidClass, ...]
    grid: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, classes: Iterable[FluidClass | Sequence[float]],
              refine: Iterable[float] = ()) -> "FluidInstance":
        """Grid = arrivals, deadlines and any extra points inside their span."""
        items = tuple(c if isinstance(c, FluidClass) else FluidClass(*map(float, c)) for c in classes)
        for k, c in enumerate(items):
            if not all(math.isfinite(v) for v in (c.arrival, c.demand, c.sojourn, c.mass)):
                raise FluidError(f"class {k}: non-finite field")
            if c.demand < 0 or c.mass < 0:
                raise FluidError(f"class {k}: demand and mass must be >= 0")
            if c.sojourn <= 0:
                raise FluidError(f"class {k}: sojourn must be > 0")
            if c.demand > c.sojourn:
                raise FluidError(f"class {k}: demand {c.demand:g} exceeds sojourn {c.sojourn:g}")
        points = {c.arrival for c in items} | {c.deadline for c in items}
        if points:
            lo, hi = min(points), max(points)
            points |= {float(t) for t in refine if lo < t < hi}
        return cls(items, np.array(sorted(points), dtype=float))

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def cell_length(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def span(self) -> float:
        return float(self.grid[-1] - self.grid[0]) if len(self.grid) else 0.0

    def window_mask(self) -> np.ndarray:
        """Boolean (classes x cells): cell lies inside the class window."""
        left, right = self.grid[:-1], self.grid[1:]
        a = np.array([c.arrival for c in self.classes])[:, None]
        d = np.array([c.deadline for c in self.classes])[:, None]
        return (left[None, :] >= a) & (right[None, :] <= d)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        cols = np.array([(c.arrival, c.demand, c.sojourn, c.mass) for c in self.classes], dtype=float)
        cols = cols.reshape(-1, 4)
        return cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3]


@dataclass
class ClassRateProfiles:
    """Per-class piecewise-constant rates on ``instance.grid``."""

    instance: FluidInstance
    rates: np.ndarray  # classes x cells
    info: SolverInfo | None = None
    intervals: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def expected_P(self) -> np.ndarray:
        mass = np.array([c.mass for c in self.instance.classes])
        return mass @ self.rates if len(mass) else np.zeros(len(self.instance.grid) - 1)

    def objective(self, alpha: float = 1.0, beta: float = 0.0) -> float:
        """Time average of alpha * E[P]^2 + beta * Var(P) over the grid span."""
        length = self.instance.cell_length
        mass = np.array([c.mass for c in self.instance.classes])
        E = self.expected_P
        var = (mass[:, None] * self.rates**2).sum(axis=0)
        span = self.instance.span
        return float((length * (alpha * E**2 + beta * var)).sum() / span) if span > 0 else 0.0

    def served(self) -> np.ndarray:
        return self.rates @ self.instance.cell_length

    def peak(self) -> float:
        E = self.expected_P
        return float(E.max()) if len(E) else 0.0

    def write_csv(self, path: str | Path) -> None:
        grid = self.instance.grid
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_index", "cell_start", "cell_end", "rate"])
            for k in range(self.rates.shape[0]):
                for j in range(self.rates.shape[1]):
                    w.writerow([k, repr(float(grid[j])), repr(float(grid[j + 1])), repr(float(self.rates[k, j]))])


# ---------------------------------------------------------------- intensity


def intensity(instance: FluidInstance, t1: float, t2: float) -> float:
    """Expected demand of classes whose window lies inside [t1, t2], per unit time."""
    if not t2 > t1:
        raise FluidError(f"need t2 > t1, got [{t1:g}, {t2:g}]")
    w = sum(c.mass * c.demand for c in instance.classes if c.arrival >= t1 and c.deadline <= t2)
    return w / (t2 - t1)


def _contained(arrival, deadline, t1, t2):
    return (arrival >= t1) & (deadline <= t2)


def _best_interval(grid, arrival, deadline, work, active, open_len):
    """Argmax of contained work over remaining (uncollapsed) length.

    ``open_len[j]`` is the not-yet-allocated length of cell j; on the first
    pass it equals the cell length, so the ratio is the plain intensity.
    Ties go to the earliest start, then the shortest interval.
    """
    cum = np.concatenate([[0.0], np.cumsum(open_len)])
    scale = max(float(cum[-1]), 1.0)
    best = (-1.0, 0.0, 0.0)
    n = len(grid)
    # scan order (t1 ascending, then t2 ascending) plus strict improvement gives the tie rule
    for i in range(n):
        for j in range(i + 1, n):
            room = cum[j] - cum[i]
            if room <= 1e-12 * scale:
                continue
            inside = active & (arrival >= grid[i]) & (deadline <= grid[j])
            if not inside.any():
                continue
            level = float(work[inside].sum() / room)
            if level > best[0] * (1 + 1e-12) + 1e-300:
                best = (level, float(grid[i]), float(grid[j]))
    return best


def max_intensity_interval(instance: FluidInstance) -> tuple[float, float, float]:
    """Breakpoint pair with the largest intensity; ties: earliest t1, then shortest."""
    arrival, demand, sojourn, mass = instance.arrays()
    active = mass > 0
    if not active.any():
        raise FluidError("instance has no class with positive mass")
    level, t1, t2 = _best_interval(instance.grid, arrival, arrival + sojourn, mass * demand, active,
                                   instance.cell_length)
    return t1, t2, level


# ---------------------------------------------------------------- max stability


def run_maxstab(instance: FluidInstance) -> ClassRateProfiles:
    """Repeatedly level the busiest interval, then remove it from play.

    Each pass picks the interval of highest remaining intensity, serves every
    class contained in it so that E[P] is flat at that level on the interval's
    free cells (earliest-deadline class takes the earliest free capacity),
    and closes those cells to all other classes.
    """
    if len(instance) == 0:
        raise FluidError("empty instance")
    arrival, demand, sojourn, mass = instance.arrays()
    deadline = arrival + sojourn
    grid, length = instance.grid, instance.cell_length
    n_cls, n_cells = len(instance), len(length)
    window = instance.window_mask()
    rates = np.zeros((n_cls, n_cells))

    carry = (mass > 0) & (demand > 0)
    for k in np.nonzero(~carry & (sojourn > 0))[0]:
        rates[k, window[k]] = demand[k] / sojourn[k]  # no expected load: Exact rate
    open_cell = np.ones(n_cells, dtype=bool)
    active = carry.copy()
    work = mass * demand
    intervals: list[tuple[float, float, float]] = []

    while active.any():
        open_len = np.where(open_cell, length, 0.0)
        level, t1, t2 = _best_interval(grid, arrival, deadline, work, active, open_len)
        if level < 0:
            k = int(np.nonzero(active)[0][0])
            raise FluidInfeasible(k, arrival[k], deadline[k], "no free time left in its window")
        in_iv = (grid[:-1] >= t1) & (grid[1:] <= t2) & open_cell
        members = np.nonzero(active & _contained(arrival, deadline, t1, t2))[0]
        budget = level * length * in_iv  # capacity still to hand out per cell
        for k in sorted(members, key=lambda k: (deadline[k], arrival[k], k)):
            need = work[k]
            for j in np.nonzero(in_iv & window[k])[0]:
                if need <= 1e-12 * max(work[k], 1e-300):
                    break
                take = min(budget[j], mass[k] * length[j], need)
                if take <= 0:
                    continue
                rates[k, j] = take / (mass[k] * length[j])
                budget[j] -= take
                need -= take
            if need > 1e-9 * max(work[k], 1e-300):
                raise FluidInfeasible(int(k), t1, t2, f"{need:.3g} expected demand left after filling at level {level:.6g}")
        intervals.append((t1, t2, level))
        open_cell &= ~in_iv
        active[members] = False
        stranded = active & ~(window & open_cell[None, :]).any(axis=1)
        if stranded.any():
            k = int(np.nonzero(stranded)[0][0])
            raise FluidInfeasible(k, t1, t2, "its remaining window was closed by this interval")
    return ClassRateProfiles(instance, rates, intervals=intervals)


# ---------------------------------------------------------------- QP oracle


def solve_fluid_qp(instance: FluidInstance, alpha: float, beta: float, tol: float = 1e-10,
                   max_iters: int = 100000, on_fail: str = "warn") -> ClassRateProfiles:
    """Minimize the time-averaged alpha * E[P]^2 + beta * Var(P) over class profiles."""
    if alpha < 0 or beta < 0 or (alpha == 0 and beta == 0):
        raise ValueError("need alpha, beta >= 0, not both zero")
    arrival, demand, sojourn, mass = instance.arrays()
    window = instance.window_mask()
    rates = np.zeros((len(instance), len(instance.cell_length)))
    carry = (mass > 0) & (demand > 0)
    for k in np.nonzero(~carry)[0]:
        rates[k, window[k]] = demand[k] / sojourn[k]
    info = None
    if carry.any():
        V, info = solve_blocks(window[carry].astype(float), instance.cell_length, mass[carry],
                               demand[carry], alpha, beta, tol=tol, max_iters=max_iters, on_fail=on_fail)
        rates[carry] = V
    return ClassRateProfiles(instance, rates, info=info)


def exact_profiles(instance: FluidInstance) -> ClassRateProfiles:
    """Flat demand/sojourn rate over each class window."""
    _, demand, sojourn, _ = instance.arrays()
    rates = instance.window_mask() * (demand / sojourn)[:, None]
    return ClassRateProfiles(instance, rates)


# ---------------------------------------------------------------- optimality conditions


@dataclass
class ParetoReport:
    passed: bool
    level: np.ndarray  # per class: the common value of alpha*E[P] + beta*v on served cells
    spread: np.ndarray  # per class: max - min of that value on served cells
    violations: list[tuple[int, int, str, float]]  # (class, cell, condition, amount)


def check_pareto_conditions(instance: FluidInstance, profiles: ClassRateProfiles, alpha: float,
                            beta: float, tol: float = 1e-6) -> ParetoReport:
    """Check that each class is served only where alpha*E[P] + beta*v is lowest and flat.

    (i) on cells of the class window with v > tol the value varies by at most tol;
    (ii) on window cells with v <= tol, alpha*E[P] is at least that value minus tol.
    """
    E = profiles.expected_P
    window = instance.window_mask()
    n = len(instance)
    level = np.full(n, np.nan)
    spread = np.zeros(n)
    bad: list[tuple[int, int, str, float]] = []
    for k in range(n):
        cells = np.nonzero(window[k])[0]
        v = profiles.rates[k, cells]
        on = v > tol
        if not on.any():
            continue
        q = alpha * E[cells] + beta * v
        hi, lo = float(q[on].max()), float(q[on].min())
        spread[k] = hi - lo
        level[k] = 0.5 * (hi + lo)
        if hi - lo > tol:
            j = int(cells[on][np.argmax(q[on])])
            bad.append((k, j, "flat", hi - lo))
        for j in cells[~on]:
            gap = lo - alpha * E[j]
            if gap > tol:
                bad.append((k, int(j), "valley", gap))
    return ParetoReport(not bad, level, spread, bad)


# ---------------------------------------------------------------- I/O and generators


def load_fluid(path: str | Path, refine: Iterable[float] = ()) -> FluidInstance:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"arrival", "demand", "sojourn"} - set(reader.fieldnames or ())
        if missing:
            raise FluidError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                rows.append(FluidClass(float(row["arrival"]), float(row["demand"]), float(row["sojourn"]),
                                       float(row.get("mass") or 1.0)))
            except ValueError as exc:
                raise FluidError(f"{path}:{line}: {exc}") from None
    return FluidInstance.build(rows, refine)


def write_fluid(instance: FluidInstance, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arrival", "demand", "sojourn", "mass"])
        for c in instance.classes:
            w.writerow([repr(c.arrival), repr(c.demand), repr(c.sojourn), repr(c.mass)])


def random_fluid_instance(seed: int, n_classes: int, span: float = 10.0) -> FluidInstance:
    """Random classes whose rate cap of 1 can never bind.

    Every class's demand/sojourn is scaled so that the summed expected load
    stays below the smallest class mass; any level the max-stability loop
    picks is then at most that mass, keeping per-class rates at most 1.
    """
    rng = np.random.default_rng(seed)
    arrival = np.round(rng.uniform(0, span, n_classes), 2)
    sojourn = np.round(rng.uniform(0.5, span / 2, n_classes), 2)
    mass = rng.uniform(1.0, 2.0, n_classes)
    share = rng.uniform(0.2, 1.0, n_classes)
    ratio = share * mass.min() / mass.sum()
    return FluidInstance.build(FluidClass(float(a), float(r * t), float(t), float(m))
                               for a, r, t, m in zip(arrival, ratio, sojourn, mass))
