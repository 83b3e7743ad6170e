"""Job types, arrival-process generation, and trace/model file I/O.

Random streams come from numpy's Philox4x64-10 counter-based bit generator,
keyed through ``numpy.random.SeedSequence(seed)``. Independent sub-streams
(marks vs. arrival times) are obtained with ``SeedSequence.spawn``, so a
reimplementation only needs those two documented numpy algorithms.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

INF = math.inf

TRACE_HEADER = ("arrival", "demand", "sojourn", "cost_demand", "cost_deadline", "known")


class ModelError(ValueError):
    """Raised for a malformed arrival model."""


class TraceParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(ValueError):
    """Raised when a job set breaks a feasibility rule."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations[:20])
        more = "" if len(self.violations) <= 20 else f" (+{len(self.violations) - 20} more)"
        super().__init__(f"{len(self.violations)} violation(s): {lines}{more}")


@dataclass(frozen=True)
class JobRequest:
    arrival: float
    demand: float
    sojourn: float
    cost_demand: float = INF
    cost_deadline: float = INF
    known: bool = True

    @property
    def deadline(self) -> float:
        return self.arrival + self.sojourn

    @property
    def laxity(self) -> float:
        return self.sojourn - self.demand


@dataclass
class JobState:
    """Live per-job state; ``remaining_time`` turns negative past the deadline."""

    request: JobRequest
    remaining_demand: float
    remaining_time: float
    served: float = 0.0
    actual_sojourn: float | None = None

    @classmethod
    def at(cls, request: JobRequest, t: float, served: float = 0.0) -> "JobState":
        return cls(request, request.demand - served, request.deadline - t, served)


@dataclass(frozen=True)
class JobSet:
    jobs: tuple[JobRequest, ...]
    horizon: float
    rejected: int = 0  # jobs dropped because their deadline passed the horizon

    @classmethod
    def build(cls, jobs: Sequence[JobRequest], horizon: float | None = None, rejected: int = 0) -> "JobSet":
        ordered = tuple(sorted(jobs, key=lambda j: j.arrival))  # stable: input order breaks ties
        if horizon is None:
            horizon = max((j.deadline for j in ordered), default=0.0)
        return cls(ordered, float(horizon), rejected)

    def __len__(self) -> int:
        return len(self.jobs)

    def __iter__(self) -> Iterator[JobRequest]:
        return iter(self.jobs)

    def __getitem__(self, k: int) -> JobRequest:
        return self.jobs[k]

    def arrays(self) -> dict[str, np.ndarray]:
        n = len(self.jobs)
        out = {
            "arrival": np.empty(n),
            "demand": np.empty(n),
            "sojourn": np.empty(n),
            "cost_demand": np.empty(n),
            "cost_deadline": np.empty(n),
            "known": np.empty(n, dtype=np.bool_),
        }
        for k, j in enumerate(self.jobs):
            out["arrival"][k] = j.arrival
            out["demand"][k] = j.demand
            out["sojourn"][k] = j.sojourn
            out["cost_demand"][k] = j.cost_demand
            out["cost_deadline"][k] = j.cost_deadline
            out["known"][k] = j.known
        return out

    @classmethod
    def from_arrays(cls, arrival, demand, sojourn, cost_demand=None, cost_deadline=None,
                    known=None, horizon: float | None = None, rejected: int = 0) -> "JobSet":
        n = len(arrival)
        cost_demand = np.full(n, INF) if cost_demand is None else np.broadcast_to(cost_demand, (n,))
        cost_deadline = np.full(n, INF) if cost_deadline is None else np.broadcast_to(cost_deadline, (n,))
        known = np.ones(n, dtype=bool) if known is None else np.broadcast_to(known, (n,))
        jobs = [
            JobRequest(float(arrival[k]), float(demand[k]), float(sojourn[k]),
                       float(cost_demand[k]), float(cost_deadline[k]), bool(known[k]))
            for k in range(n)
        ]
        return cls.build(jobs, horizon, rejected)

    def with_costs(self, cost_demand: float | None = None, cost_deadline: float | None = None) -> "JobSet":
        """Copy with every job's penalty costs overridden (``None`` keeps the job's own)."""
        jobs = [
            JobRequest(j.arrival, j.demand, j.sojourn,
                       j.cost_demand if cost_demand is None else cost_demand,
                       j.cost_deadline if cost_deadline is None else cost_deadline,
                       j.known)
            for j in self.jobs
        ]
        return JobSet(tuple(jobs), self.horizon, self.rejected)


# ---------------------------------------------------------------- distributions


@dataclass(frozen=True)
class Dist:
    """Scalar mark distribution: ``const``, ``uniform`` or ``exponential``."""

    kind: str
    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("const", "uniform", "exponential"):
            raise ModelError(f"unknown distribution kind {self.kind!r}")
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ModelError(f"non-finite distribution parameter in {self}")
        if self.kind == "uniform" and self.b < self.a:
            raise ModelError(f"uniform bounds reversed: {self.a} > {self.b}")
        if self.kind == "exponential" and self.a < 0:
            raise ModelError("exponential mean must be >= 0")

    @classmethod
    def const(cls, value: float) -> "Dist":
        return cls("const", float(value))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "Dist":
        return cls("uniform", float(lo), float(hi))

    @classmethod
    def exponential(cls, mean: float) -> "Dist":
        return cls("exponential", float(mean))

    @classmethod
    def parse(cls, text: str) -> "Dist":
        """Parse ``3``, ``const:3``, ``uniform:10,20`` or ``exponential:15``."""
        text = text.strip()
        if ":" not in text:
            return cls.const(float(text))
        kind, _, args = text.partition(":")
        vals = [float(v) for v in args.split(",") if v.strip()]
        kind = kind.strip().lower()
        if kind == "const" and len(vals) == 1:
            return cls.const(vals[0])
        if kind == "uniform" and len(vals) == 2:
            return cls.uniform(*vals)
        if kind in ("exponential", "exp") and len(vals) == 1:
            return cls.exponential(vals[0])
        raise ModelError(f"cannot parse distribution {text!r}")

    def __str__(self) -> str:
        if self.kind == "uniform":
            return f"uniform:{self.a!r},{self.b!r}"
        return f"{self.kind}:{self.a!r}"

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "const":
            return np.full(n, self.a)
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, n) if self.b > self.a else np.full(n, self.a)
        return rng.exponential(self.a, n) if self.a > 0 else np.zeros(n)

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.a + self.b)
        return self.a

    @property
    def second_moment(self) -> float:
        if self.kind == "const":
            return self.a**2
        if self.kind == "uniform":
            return (self.a**2 + self.a * self.b + self.b**2) / 3.0
        return 2.0 * self.a**2


@dataclass(frozen=True)
class MarkSampler:
    """Draws (demand, sojourn, costs, known) marks independently per job.

    Exactly one of ``sojourn``, ``laxity`` (sojourn = demand + laxity) or
    ``stretch`` (sojourn = stretch * demand) must be given.
    """

    demand: Dist
    sojourn: Dist | None = None
    laxity: Dist | None = None
    stretch: Dist | None = None
    cost_demand: float = INF
    cost_deadline: float = INF
    p_known: float = 1.0

    def __post_init__(self):
        given = sum(d is not None for d in (self.sojourn, self.laxity, self.stretch))
        if given != 1:
            raise ModelError("give exactly one of sojourn, laxity, stretch")
        if self.stretch is not None and self.stretch.kind != "exponential" and self.stretch.a < 1:
            raise ModelError("stretch factor must be >= 1")
        if self.cost_demand < 0 or self.cost_deadline < 0:
            raise ModelError("penalty costs must be >= 0")
        if not 0.0 <= self.p_known <= 1.0:
            raise ModelError("p_known must lie in [0, 1]")

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
        """Return (demand, sojourn, known, resampled_count); rejects sigma > tau."""
        sigma = np.empty(n)
        tau = np.empty(n)
        filled = 0
        resampled = 0
        while filled < n:
            m = n - filled
            s = np.maximum(self.demand.sample(rng, m), 0.0)
            if self.sojourn is not None:
                t = self.sojourn.sample(rng, m)
            elif self.laxity is not None:
                t = s + self.laxity.sample(rng, m)
            else:
                t = s * self.stretch.sample(rng, m)
            ok = s <= t
            k = int(ok.sum())
            sigma[filled:filled + k] = s[ok]
            tau[filled:filled + k] = t[ok]
            filled += k
            resampled += m - k
            if k == 0 and resampled > 1000 * max(n, 1):
                raise ModelError("mark sampler almost never produces demand <= sojourn")
        known = rng.random(n) < self.p_known if self.p_known < 1.0 else np.ones(n, dtype=bool)
        return sigma, tau, known, resampled


# ---------------------------------------------------------------- arrival models

KINDS = ("stationary_poisson", "nonstationary_poisson", "bernoulli_grid_i", "bernoulli_grid_ii")


@dataclass(frozen=True)
class ArrivalModel:
    kind: str
    horizon: float
    marks: MarkSampler
    rate: float = 0.0
    step: float = 1.0
    p_b: float = 0.0
    intensity_times: tuple[float, ...] = ()  # left edges of constant-intensity pieces
    intensity_rates: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ModelError("horizon must be finite and > 0")
        if not (math.isfinite(self.rate) and self.rate >= 0):
            raise ModelError("rate must be finite and >= 0")
        if self.kind.startswith("bernoulli"):
            if not (math.isfinite(self.step) and self.step > 0):
                raise ModelError("grid step must be finite and > 0")
            if not 0.0 <= self.p_b <= 1.0:
                raise ModelError("p_b must lie in [0, 1]")
        if self.kind == "nonstationary_poisson":
            if len(self.intensity_times) != len(self.intensity_rates) or not self.intensity_times:
                raise ModelError("intensity_times and intensity_rates must be non-empty and aligned")
            if any(not math.isfinite(r) or r < 0 for r in self.intensity_rates):
                raise ModelError("intensity rates must be finite and >= 0")
            if list(self.intensity_times) != sorted(self.intensity_times) or self.intensity_times[0] != 0:
                raise ModelError("intensity_times must start at 0 and increase")

    @classmethod
    def stationary_poisson(cls, rate: float, marks: MarkSampler, horizon: float) -> "ArrivalModel":
        return cls("stationary_poisson", horizon, marks, rate=rate)

    @classmethod
    def distribution_i(cls, p_b: float, mean_laxity: float, horizon: float, step: float = 1.0,
                       sigma_lo: float = 10.0, sigma_hi: float = 20.0, **costs) -> "ArrivalModel":
        marks = MarkSampler(Dist.uniform(sigma_lo, sigma_hi), laxity=Dist.exponential(mean_laxity), **costs)
        return cls("bernoulli_grid_i", horizon, marks, step=step, p_b=p_b)

    @classmethod
    def distribution_ii(cls, p_b: float, gamma_max: float, horizon: float, step: float = 1.0,
                        sigma_lo: float = 10.0, sigma_hi: float = 20.0, **costs) -> "ArrivalModel":
        marks = MarkSampler(Dist.uniform(sigma_lo, sigma_hi), stretch=Dist.uniform(1.0, gamma_max), **costs)
        return cls("bernoulli_grid_ii", horizon, marks, step=step, p_b=p_b)

    @property
    def mean_rate(self) -> float:
        """Long-run arrival rate (before horizon rejection)."""
        if self.kind == "stationary_poisson":
            return self.rate
        if self.kind.startswith("bernoulli"):
            return self.p_b / self.step
        edges = list(self.intensity_times) + [self.horizon]
        mass = sum(r * max(0.0, min(edges[i + 1], self.horizon) - edges[i])
                   for i, r in enumerate(self.intensity_rates))
        return mass / self.horizon


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _split(seed: int, n: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _poisson_times(rng: np.random.Generator, rate: float, t0: float, t1: float) -> np.ndarray:
    """Exponential inter-arrival gaps on [t0, t1)."""
    if rate <= 0 or t1 <= t0:
        return np.empty(0)
    out = []
    t = t0
    chunk = max(16, int(rate * (t1 - t0) * 1.1) + 16)
    while True:
        gaps = rng.exponential(1.0 / rate, chunk)
        times = t + np.cumsum(gaps)
        inside = times[times < t1]
        out.append(inside)
        if len(inside) < chunk:
            break
        t = times[-1]
    return np.concatenate(out)


def sample_arrivals(model: ArrivalModel, seed: int) -> JobSet:
    """Draw one job set; jobs whose deadline passes the horizon are dropped."""
    time_rng, mark_rng = _split(int(seed), 2)
    T = model.horizon
    if model.kind == "stationary_poisson":
        arrivals = _poisson_times(time_rng, model.rate, 0.0, T)
    elif model.kind == "nonstationary_poisson":
        edges = list(model.intensity_times) + [T]
        pieces = [_poisson_times(time_rng, r, edges[i], min(edges[i + 1], T))
                  for i, r in enumerate(model.intensity_rates) if edges[i] < T]
        arrivals = np.concatenate(pieces) if pieces else np.empty(0)
    else:
        n_grid = int(math.floor(T / model.step + 1e-9))
        hits = time_rng.random(n_grid) < model.p_b
        arrivals = np.nonzero(hits)[0] * model.step

    sigma, tau, known, _ = model.marks.sample(mark_rng, len(arrivals))
    keep = arrivals + tau <= T * (1 + 1e-12)
    n = int(keep.sum())
    return JobSet.from_arrays(
        arrivals[keep], sigma[keep], tau[keep],
        np.full(n, model.marks.cost_demand), np.full(n, model.marks.cost_deadline),
        known[keep], horizon=T, rejected=int(len(arrivals) - n),
    )


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    job: int
    kind: str  # InfeasibleDemand | NegativeDemand | NegativeArrival | PastHorizon | NegativeCost
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind}(job {self.job}{': ' + self.detail if self.detail else ''})"


def validate_jobset(jobs: JobSet) -> list[Violation]:
    out: list[Violation] = []
    for k, j in enumerate(jobs.jobs):
        if j.demand < 0:
            out.append(Violation(k, "NegativeDemand", f"demand={j.demand}"))
        if j.demand > j.sojourn:
            out.append(Violation(k, "InfeasibleDemand", f"demand={j.demand} > sojourn={j.sojourn}"))
        if j.arrival < 0:
            out.append(Violation(k, "NegativeArrival", f"arrival={j.arrival}"))
        if j.deadline > jobs.horizon * (1 + 1e-12):
            out.append(Violation(k, "PastHorizon", f"deadline={j.deadline} > horizon={jobs.horizon}"))
        if j.cost_demand < 0 or j.cost_deadline < 0:
            out.append(Violation(k, "NegativeCost"))
    return out


# ---------------------------------------------------------------- trace files


def _cost_cell(text: str) -> float:
    text = text.strip()
    return INF if text == "" else float(text)


def _known_cell(text: str) -> bool:
    text = text.strip().lower()
    if text in ("", "1", "true", "yes"):
        return True
    if text in ("0", "false", "no"):
        return False
    raise ValueError(f"bad known flag {text!r}")


def load_trace(path: str | Path, horizon: float | None = None) -> JobSet:
    """Read a trace CSV; empty cost cells mean strict, an empty ``known`` cell means true."""
    jobs: list[JobRequest] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceParseError(1, "missing header")
        names = [h.strip() for h in header]
        if names[:3] != list(TRACE_HEADER[:3]):
            raise TraceParseError(1, f"expected header starting {','.join(TRACE_HEADER[:3])}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) > len(TRACE_HEADER):
                raise TraceParseError(line, f"too many columns ({len(row)})")
            cells = list(row) + [""] * (len(TRACE_HEADER) - len(row))
            try:
                a, s, t = (float(c) for c in cells[:3])
                job = JobRequest(a, s, t, _cost_cell(cells[3]), _cost_cell(cells[4]), _known_cell(cells[5]))
            except ValueError as exc:
                raise TraceParseError(line, str(exc)) from None
            if not all(math.isfinite(v) for v in (a, s, t)):
                raise TraceParseError(line, "non-finite arrival/demand/sojourn")
            jobs.append(job)
    jobset = JobSet.build(jobs, horizon)
    bad = [v for v in validate_jobset(jobset) if v.kind != "PastHorizon" or horizon is not None]
    if bad:
        raise ValidationError(bad)
    return jobset


def _fmt(v: float) -> str:
    return "" if math.isinf(v) else repr(float(v))


def write_trace(jobs: JobSet, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for j in jobs:
            w.writerow([repr(j.arrival), repr(j.demand), repr(j.sojourn),
                        _fmt(j.cost_demand), _fmt(j.cost_deadline), "1" if j.known else "0"])


# ---------------------------------------------------------------- model files


def _float(sec: configparser.SectionProxy, key: str, default: float | None = None) -> float:
    if key not in sec:
        if default is None:
            raise ModelError(f"missing key {key!r} in [{sec.name}]")
        return default
    text = sec[key].strip().lower()
    if text in ("inf", "strict", ""):
        return INF
    return float(text)


def load_model(path: str | Path) -> ArrivalModel:
    """Read an INI-style model file (schema in docs/model_files.md)."""
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path, encoding="utf-8"):
            raise ModelError(f"cannot read model file {path}")
    except configparser.Error as exc:
        raise ModelError(str(exc)) from None
    if "model" not in cp:
        raise ModelError("model file needs a [model] section")
    m = cp["model"]
    kind = m.get("kind", "").strip().lower()
    horizon = _float(m, "horizon")
    marks_sec = cp["marks"] if "marks" in cp else m
    costs = dict(
        cost_demand=_float(marks_sec, "cost_demand", INF),
        cost_deadline=_float(marks_sec, "cost_deadline", INF),
        p_known=_float(marks_sec, "p_known", 1.0),
    )
    try:
        if kind == "bernoulli_grid_i":
            marks = MarkSampler(
                Dist.uniform(_float(m, "sigma_lo"), _float(m, "sigma_hi")),
                laxity=Dist.exponential(_float(m, "mean_laxity")), **costs)
            return ArrivalModel(kind, horizon, marks, step=_float(m, "step", 1.0), p_b=_float(m, "p_b"))
        if kind == "bernoulli_grid_ii":
            marks = MarkSampler(
                Dist.uniform(_float(m, "sigma_lo"), _float(m, "sigma_hi")),
                stretch=Dist.uniform(1.0, _float(m, "gamma_max")), **costs)
            return ArrivalModel(kind, horizon, marks, step=_float(m, "step", 1.0), p_b=_float(m, "p_b"))
        shape = {key: Dist.parse(marks_sec[key]) for key in ("sojourn", "laxity", "stretch") if key in marks_sec}
        marks = MarkSampler(Dist.parse(marks_sec.get("demand", "")), **shape, **costs)
        if kind == "stationary_poisson":
            return ArrivalModel(kind, horizon, marks, rate=_float(m, "rate"))
        if kind == "nonstationary_poisson":
            times = tuple(float(v) for v in m["intensity_times"].split(","))
            rates = tuple(float(v) for v in m["intensity_rates"].split(","))
            return ArrivalModel(kind, horizon, marks, intensity_times=times, intensity_rates=rates)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"bad model file: {exc}") from None
    raise ModelError(f"unknown model kind {kind!r}")


def dump_model(model: ArrivalModel) -> str:
    """Inverse of :func:`load_model` (text form)."""
    lines = ["[model]", f"kind = {model.kind}", f"horizon = {model.horizon!r}"]
    mk = model.marks
    if model.kind.startswith("bernoulli"):
        lines += [f"step = {model.step!r}", f"p_b = {model.p_b!r}",
                  f"sigma_lo = {mk.demand.a!r}", f"sigma_hi = {mk.demand.b!r}"]
        if model.kind == "bernoulli_grid_i":
            lines.append(f"mean_laxity = {mk.laxity.a!r}")
        else:
            lines.append(f"gamma_max = {mk.stretch.b!r}")
        lines.append("")
        lines.append("[marks]")
    else:
        if model.kind == "stationary_poisson":
            lines.append(f"rate = {model.rate!r}")
        else:
            lines.append("intensity_times = " + ",".join(repr(v) for v in model.intensity_times))
            lines.append("intensity_rates = " + ",".join(repr(v) for v in model.intensity_rates))
        lines += ["", "[marks]", f"demand = {mk.demand}"]
        for key in ("sojourn", "laxity", "stretch"):
            d = getattr(mk, key)
            if d is not None:
                lines.append(f"{key} = {d}")
    lines.append(f"cost_demand = {'inf' if math.isinf(mk.cost_demand) else repr(mk.cost_demand)}")
    lines.append(f"cost_deadline = {'inf' if math.isinf(mk.cost_deadline) else repr(mk.cost_deadline)}")
    lines.append(f"p_known = {mk.p_known!r}")
    return "\n".join(lines) + "\n"
