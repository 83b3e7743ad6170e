"""Rate controllers.

Every scalar rule is a numba ``njit`` function so the simulation kernel and
the public API share one implementation. Rates are always clamped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .model import JobState

INF = math.inf

# policy kinds (kernel codes)
IMMEDIATE, DELAYED, EXACT, GES, EQUAL, ESPC, EDF, LLF, FAIR, GES_UNKNOWN = range(10)
KIND_CODES = {
    "immediate": IMMEDIATE, "delayed": DELAYED, "exact": EXACT, "ges": GES,
    "equal": EQUAL, "espc": ESPC, "edf": EDF, "llf": LLF, "fair": FAIR,
    "ges_unknown": GES_UNKNOWN,
}
STRICT, SOFT_DEMAND, SOFT_DEADLINE = 0, 1, 2
MODE_CODES = {"strict": STRICT, "soft_demand": SOFT_DEMAND, "soft_deadline": SOFT_DEADLINE}

# what happens to unfinished work at a job's deadline
DROP_STRICT, DROP_CHARGE, KEEP_GOING = 0, 1, 2


def mode_code(mode: str) -> int:
    try:
        return MODE_CODES[mode]
    except KeyError:
        raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(MODE_CODES)}") from None


@njit(cache=True)
def clamp_rate(r):
    if r != r or r <= 0.0:  # NaN guard
        return 0.0
    if r >= 1.0:
        return 1.0
    return r


@njit(cache=True)
def _exact(y, x):
    if x > 0.0 and y > 0.0:
        return clamp_rate(y / x)
    return 0.0


@njit(cache=True)
def _ges(y, x, C, eps):
    half = 0.5 * C
    root = math.sqrt(eps)
    if x > 0.0:
        ratio = y / x
        if ratio <= min(half, root):
            return clamp_rate(ratio)
        if ratio > half and half <= root:
            return clamp_rate(half)
        return clamp_rate(root) if y > 0.0 else 0.0
    # past the deadline only the extension regime keeps serving
    if y > 0.0 and root < half:
        return clamp_rate(root)
    return 0.0


@njit(cache=True)
def _immediate(y):
    return 1.0 if y > 0.0 else 0.0


@njit(cache=True)
def _delayed(y, x, dt):
    if y <= 0.0:
        return 0.0
    if dt <= 0.0:
        return 1.0 if x <= y else 0.0
    # smallest rate that keeps the end-of-step laxity non-negative
    return clamp_rate(1.0 - (x - y) / dt)


@njit(cache=True)
def _equal(y, x, mode, c, dt):
    if y <= 0.0:
        return 0.0
    if mode == SOFT_DEMAND:
        return clamp_rate(c) if x > 0.0 else 0.0
    if mode == SOFT_DEADLINE:
        return clamp_rate(c)
    lax = x - y
    if dt <= 0.0:
        return clamp_rate(c) if lax > 0.0 else 1.0
    return clamp_rate(max(c, 1.0 - lax / dt))


@njit(cache=True)
def _espc(y, x, p_prev, p_bar, mu):
    if x <= 0.0 or y <= 0.0:
        return 0.0
    r = y / x
    if p_prev < p_bar:
        r *= mu
    return clamp_rate(r)


@njit(cache=True)
def _eligible(y, x, mode):
    if y <= 0.0:
        return False
    if mode == SOFT_DEADLINE:
        return True
    return x > 0.0


@njit(cache=True)
def _priority(y, x, p, order, mode, out):
    """Fill ``out`` with priority rates; inputs are in (arrival, index) order."""
    n = y.shape[0]
    key = np.empty(n)
    count = 0
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = 0.0
        if _eligible(y[i], x[i], mode):
            idx[count] = i
            key[count] = x[i] if order == 0 else x[i] - y[i]
            count += 1
    if count == 0:
        return
    perm = np.argsort(key[:count], kind="mergesort")  # stable keeps arrival/index ties
    left = p
    for q in range(count):
        i = idx[perm[q]]
        r = min(1.0, max(left, 0.0))
        out[i] = r
        left -= r


@njit(cache=True)
def _fair(y, x, p, mode, out):
    n = y.shape[0]
    count = 0
    for i in range(n):
        if _eligible(y[i], x[i], mode):
            count += 1
    share = min(p / count, 1.0) if count > 0 else 0.0
    for i in range(n):
        out[i] = share if _eligible(y[i], x[i], mode) else 0.0


# ---------------------------------------------------------------- public API


def rate_exact(y: float, x: float) -> float:
    """Remaining demand over remaining time; zero once the deadline has passed."""
    return _exact(float(y), float(x))


def rate_ges(y: float, x: float, C: float, eps: float) -> float:
    """Exact scheduling with a demand threshold C/2 and a deadline threshold sqrt(eps)."""
    return _ges(float(y), float(x), float(C), float(eps))


def rate_immediate(y: float) -> float:
    return _immediate(float(y))


def rate_delayed(y: float, x: float, dt: float = 0.0) -> float:
    """Full rate once remaining time drops to remaining demand.

    With ``dt > 0`` the switch happens within the step so laxity never goes
    negative at a step boundary; ``dt = 0`` is the continuous-time rule.
    """
    return _delayed(float(y), float(x), float(dt))


def rate_equal_service(y: float, x: float, mode: str, c: float, dt: float = 0.0) -> float:
    """Homogeneous rate ``c``; strict mode switches to full rate at zero laxity."""
    if c < 0:
        raise ValueError("c must be >= 0")
    return _equal(float(y), float(x), mode_code(mode), float(c), float(dt))


def rate_es_pc(y: float, x: float, p_prev: float, p_bar: float, mu: float) -> float:
    """Exact scheduling boosted by ``mu`` while last step's capacity was below ``p_bar``."""
    if mu < 1:
        raise ValueError("mu must be >= 1")
    return _espc(float(y), float(x), float(p_prev), float(p_bar), float(mu))


def _snapshot(jobs: Sequence[JobState]) -> tuple[np.ndarray, np.ndarray]:
    order = sorted(range(len(jobs)), key=lambda i: (jobs[i].request.arrival, i))
    y = np.array([jobs[i].remaining_demand for i in order], dtype=float)
    x = np.array([jobs[i].remaining_time for i in order], dtype=float)
    return np.asarray(order, dtype=np.int64), np.stack([y, x]) if len(order) else np.zeros((2, 0))


def assign_priority(jobs: Sequence[JobState], p: float, order: str = "deadline",
                    mode: str = "soft_demand") -> dict[int, float]:
    """EDF (``order='deadline'``) or LLF (``order='laxity'``) with capacity ``p``.

    Keys of the result are positions in ``jobs``; only eligible jobs appear.
    """
    if p < 0:
        raise ValueError("capacity must be >= 0")
    if order not in ("deadline", "laxity"):
        raise ValueError("order must be 'deadline' or 'laxity'")
    perm, yx = _snapshot(jobs)
    out = np.zeros(len(perm))
    m = mode_code(mode)
    _priority(yx[0], yx[1], float(p), 0 if order == "deadline" else 1, m, out)
    return {int(perm[i]): float(out[i]) for i in range(len(perm)) if _eligible(yx[0, i], yx[1, i], m)}


def assign_fair(jobs: Sequence[JobState], p: float, mode: str = "soft_demand") -> dict[int, float]:
    """Split ``p`` equally among eligible jobs, at most 1 each."""
    if p < 0:
        raise ValueError("capacity must be >= 0")
    perm, yx = _snapshot(jobs)
    out = np.zeros(len(perm))
    m = mode_code(mode)
    _fair(yx[0], yx[1], float(p), m, out)
    return {int(perm[i]): float(out[i]) for i in range(len(perm)) if _eligible(yx[0, i], yx[1, i], m)}


def rate_ges_unknown(state: JobState, C: float, eps: float, fallback_c: float) -> float:
    """GES for jobs that report their requirements, a flat fallback rate otherwise."""
    if fallback_c < 0:
        raise ValueError("fallback_c must be >= 0")
    y = state.remaining_demand
    if state.request.known:
        return rate_ges(y, state.remaining_time, C, eps)
    return clamp_rate(float(fallback_c)) if y > 0 else 0.0


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class PolicyConfig:
    """A rate controller and its parameters.

    ``capacity`` is p for EDF/LLF/fair sharing, ``c`` the Equal Service rate,
    ``mu``/``p_bar`` the ES-PC boost and target (``None``: supplied at run
    time), ``fallback_c`` the rate for jobs with unknown requirements.
    GES-type policies read C and eps from each job.
    """

    kind: str
    mode: str = "strict"
    capacity: float = 1.0
    c: float = 0.5
    mu: float = 1.0
    p_bar: float | None = None
    fallback_c: float = 0.5

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown policy {self.kind!r}; expected one of {sorted(KIND_CODES)}")
        mode_code(self.mode)
        if self.capacity < 0 or self.c < 0 or self.fallback_c < 0:
            raise ValueError("capacity parameters must be >= 0")
        if self.mu < 1:
            raise ValueError("mu must be >= 1")

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    @property
    def label(self) -> str:
        extra = {
            "equal": f"(c={self.c:g},{self.mode})", "espc": f"(mu={self.mu:g})",
            "edf": f"(p={self.capacity:g},{self.mode})", "llf": f"(p={self.capacity:g},{self.mode})",
            "fair": f"(p={self.capacity:g},{self.mode})", "ges_unknown": f"(c={self.fallback_c:g},{self.mode})",
        }
        return self.kind + extra.get(self.kind, "")

    def params(self, p_bar: float = 0.0) -> np.ndarray:
        pb = self.p_bar if self.p_bar is not None else p_bar
        return np.array([self.capacity, self.c, self.mu, pb, self.fallback_c], dtype=float)

    def replace(self, **changes) -> "PolicyConfig":
        from dataclasses import replace
        return replace(self, **changes)


def parse_policy(text: str, defaults: Mapping[str, float] | None = None) -> PolicyConfig:
    """Parse ``exact``, ``equal:c=0.6,mode=strict``, ``edf:capacity=4,mode=soft_demand``."""
    name, _, rest = text.strip().partition(":")
    kwargs: dict = dict(defaults or {})
    for part in filter(None, (p.strip() for p in rest.split(","))):
        key, _, value = part.partition("=")
        key = key.strip()
        if key == "mode":
            kwargs["mode"] = value.strip()
        elif key == "p":
            kwargs["capacity"] = float(value)
        elif key in ("capacity", "c", "mu", "p_bar", "fallback_c"):
            kwargs[key] = float(value)
        else:
            raise ValueError(f"unknown policy parameter {key!r}")
    allowed = {"mode", "capacity", "c", "mu", "p_bar", "fallback_c"}
    return PolicyConfig(name.strip().lower(), **{k: v for k, v in kwargs.items() if k in allowed})
