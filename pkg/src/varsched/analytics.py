"""Stationary cost formulas, moment integrals and centralized-vs-distributed bounds.

Every expectation over the job marks (demand sigma, sojourn tau) goes through
``MarkMoments``, a weighted sample of marks. Degenerate marks carry one point
with weight 1, quadrature carries Gauss nodes, and Monte Carlo carries equally
weighted draws and reports standard errors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .model import ArrivalModel, Dist, MarkSampler, make_rng

INF = math.inf


class ThresholdWarning(UserWarning):
    """A rate threshold of the soft-constraint formulas sits above the unit rate cap."""


# ---------------------------------------------------------------- moments


@dataclass(frozen=True)
class MarkMoments:
    """Arrival rate plus a weighted sample of (sigma, tau) marks."""

    rate: float
    sigma: np.ndarray
    tau: np.ndarray
    weight: np.ndarray
    method: str = "degenerate"  # degenerate | quadrature | monte_carlo | samples
    seed: int | None = None

    def __post_init__(self):
        if not (self.rate >= 0 and math.isfinite(self.rate)):
            raise ValueError("arrival rate must be finite and >= 0")
        if len(self.sigma) == 0:
            raise ValueError("need at least one mark")
        # demand may exceed sojourn: soft-constraint formulas price such jobs
        if np.any(self.sigma < 0) or np.any(self.tau <= 0):
            raise ValueError("marks need sigma >= 0 and tau > 0")

    @classmethod
    def degenerate(cls, rate: float, sigma: float, tau: float) -> "MarkMoments":
        return cls(float(rate), np.array([float(sigma)]), np.array([float(tau)]), np.ones(1))

    @classmethod
    def from_samples(cls, rate: float, sigma, tau, method: str = "samples",
                     seed: int | None = None) -> "MarkMoments":
        sigma = np.asarray(sigma, dtype=float)
        tau = np.asarray(tau, dtype=float)
        return cls(float(rate), sigma, tau, np.full(len(sigma), 1.0 / len(sigma)), method, seed)

    @classmethod
    def from_model(cls, model: ArrivalModel | MarkSampler, rate: float | None = None,
                   n_samples: int = 1_000_000, seed: int = 0, method: str = "monte_carlo",
                   n_nodes: int = 200) -> "MarkMoments":
        """Moments of a model's marks by Monte Carlo or Gauss quadrature.

        Quadrature conditions on demand <= sojourn exactly like the sampler's
        rejection step does, by dropping infeasible nodes and renormalizing.
        """
        marks = model.marks if isinstance(model, ArrivalModel) else model
        if rate is None:
            if not isinstance(model, ArrivalModel):
                raise ValueError("rate is required when passing a bare mark sampler")
            rate = model.mean_rate
        if method == "monte_carlo":
            sigma, tau, _, _ = marks.sample(make_rng(seed), int(n_samples))
            return cls.from_samples(rate, sigma, tau, "monte_carlo", seed)
        if method != "quadrature":
            raise ValueError("method must be 'monte_carlo' or 'quadrature'")
        s_nodes, s_w = _nodes(marks.demand, n_nodes)
        other = marks.sojourn or marks.laxity or marks.stretch
        o_nodes, o_w = _nodes(other, n_nodes)
        S, O = np.meshgrid(s_nodes, o_nodes, indexing="ij")
        W = np.outer(s_w, o_w)
        if marks.sojourn is not None:
            T = O
        elif marks.laxity is not None:
            T = S + O
        else:
            T = S * O
        ok = (S <= T) & (T > 0) & (W > 0)
        if not ok.any():
            raise ValueError("no feasible quadrature node")
        W = np.where(ok, W, 0.0)
        W = W / W.sum()
        return cls(float(rate), S[ok], T[ok], W[ok], "quadrature", None)

    def expect(self, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weight, f(self.sigma, self.tau)))

    def expect_se(self, f: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> tuple[float, float]:
        """Expectation and its Monte Carlo standard error (zero for exact weights)."""
        vals = np.asarray(f(self.sigma, self.tau), dtype=float)
        mean = float(np.dot(self.weight, vals))
        if self.method in ("monte_carlo", "samples") and len(vals) > 1:
            return mean, float(vals.std(ddof=1) / math.sqrt(len(vals)))
        return mean, 0.0

    @property
    def n_samples(self) -> int:
        return len(self.sigma)

    # named moments
    @property
    def mean_sigma(self) -> float:
        return self.expect(lambda s, t: s)

    @property
    def mean_sigma_sq(self) -> float:
        return self.expect(lambda s, t: s * s)

    @property
    def mean_sigma_sq_over_tau(self) -> float:
        return self.expect(lambda s, t: s * s / t)

    @property
    def mean_sigma_sq_tau(self) -> float:
        return self.expect(lambda s, t: s * s * t)

    @property
    def mean_sigma_tau(self) -> float:
        return self.expect(lambda s, t: s * t)

    @property
    def mean_tau(self) -> float:
        return self.expect(lambda s, t: t)


def _nodes(dist: Dist, n: int) -> tuple[np.ndarray, np.ndarray]:
    if dist.kind == "const":
        return np.array([dist.a]), np.ones(1)
    if dist.kind == "uniform":
        if dist.b == dist.a:
            return np.array([dist.a]), np.ones(1)
        x, w = np.polynomial.legendre.leggauss(n)
        return dist.a + (x + 1) * (dist.b - dist.a) / 2, w / 2
    x, w = np.polynomial.laguerre.laggauss(min(n, 150))  # exponential with mean a
    return dist.a * x, w


# ---------------------------------------------------------------- stationary formulas


def stationary_mean(moments: MarkMoments | float, mean_served: float) -> float:
    """Long-run mean capacity: arrival rate times expected service per job."""
    rate = moments.rate if isinstance(moments, MarkMoments) else float(moments)
    return rate * float(mean_served)


def var_exact(m: MarkMoments) -> float:
    """Stationary capacity variance of Exact Scheduling."""
    return m.rate * m.mean_sigma_sq_over_tau


def var_x_exact(m: MarkMoments) -> float:
    """Stationary variance of total remaining demand under Exact Scheduling."""
    return m.rate * m.mean_sigma_sq_tau / 3.0


def _warn_thresholds(C: float, eps: float) -> None:
    if math.isfinite(C) and C / 2 > 1:
        warnings.warn(ThresholdWarning(f"C/2 = {C / 2:g} exceeds the unit rate cap; formula and clamped "
                                       "simulation disagree"), stacklevel=3)
    if math.isfinite(eps) and math.sqrt(eps) > 1:
        warnings.warn(ThresholdWarning(f"sqrt(eps) = {math.sqrt(eps):g} exceeds the unit rate cap; formula "
                                       "and clamped simulation disagree"), stacklevel=3)


def _branches(s, t, C, eps):
    """Masks for the three GES regimes: exact, drop unmet demand, extend the deadline."""
    ratio = s / t
    half, root = C / 2, math.sqrt(eps)
    exact = ratio <= min(half, root)
    drop = (ratio > half) & (half <= root)
    extend = (ratio > root) & (root < half)
    return exact, drop, extend


class GesCost(NamedTuple):
    variance: float
    unmet: float  # C * E[unmet demand] * rate
    extension: float  # eps * E[extension] * rate
    total: float


def ges_cost_components(m: MarkMoments, C: float, eps: float) -> GesCost:
    """Capacity variance and the two penalty rates of GES, per unit time."""
    if C < 0 or eps < 0:
        raise ValueError("C and eps must be >= 0")
    s, t = m.sigma, m.tau
    exact, drop, extend = _branches(s, t, C, eps)
    Cf = C if math.isfinite(C) else 0.0
    root = math.sqrt(eps) if math.isfinite(eps) else 1.0
    var = np.where(exact, s * s / t, 0.0)
    var = var + np.where(drop, Cf * Cf * t / 4, 0.0) + np.where(extend, root * s, 0.0)
    unmet = np.where(drop, Cf * (s - Cf * t / 2), 0.0)
    ext = np.where(extend, eps * (s / root - t) if math.isfinite(eps) else 0.0, 0.0)
    v, u, e = (m.rate * float(np.dot(m.weight, a)) for a in (var, unmet, ext))
    return GesCost(v, u, e, v + u + e)


def cost_ges(m: MarkMoments, C: float, eps: float) -> float:
    """Stationary variance plus penalty rates under GES, by the three-regime formula."""
    if C < 0 or eps < 0:
        raise ValueError("C and eps must be >= 0")
    _warn_thresholds(C, eps)
    s, t = m.sigma, m.tau
    exact, drop, extend = _branches(s, t, C, eps)
    Cf = C if math.isfinite(C) else 0.0
    ef = eps if math.isfinite(eps) else 0.0
    val = (np.where(exact, s * s / t, 0.0)
           + np.where(drop, Cf * (s - Cf * t / 4), 0.0)
           + np.where(extend, 2 * math.sqrt(ef) * s - ef * t, 0.0))
    return m.rate * float(np.dot(m.weight, val))


def cost_soft_demand(m: MarkMoments, C: float) -> float:
    """GES cost when deadlines are strict."""
    return cost_ges(m, C, INF)


def cost_soft_deadline(m: MarkMoments, eps: float) -> float:
    """GES cost when demands are strict."""
    return cost_ges(m, INF, eps)


# ---------------------------------------------------------------- bounds


def lower_bound_centralized(m: MarkMoments, var_x: float) -> float:
    """Smallest capacity variance any scheduler can reach at remaining-demand variance ``var_x``."""
    if not var_x > 0:
        raise ValueError("remaining-demand variance must be > 0")
    return (m.rate * m.mean_sigma_sq) ** 2 / (4.0 * var_x)


class ExactRatioBound(NamedTuple):
    general: float  # against any centralized scheduler
    same_var_x: float  # against schedulers matching Exact's remaining-demand variance


def ratio_bound_exact(m: MarkMoments) -> ExactRatioBound:
    """Upper bounds on Exact Scheduling's variance over the centralized optimum."""
    e2 = m.mean_sigma_sq
    if e2 <= 0:
        raise ValueError("need E[sigma^2] > 0")
    q = m.mean_sigma_sq_over_tau
    general = 4 * q * (m.mean_sigma_sq_tau + m.rate * m.mean_sigma_tau ** 2) / e2 ** 2
    same = (4.0 / 3.0) * q * m.mean_sigma_sq_tau / e2 ** 2
    return ExactRatioBound(general, same)


class GesRatioBound(NamedTuple):
    alpha: float
    beta: float
    factor: float  # 4 * alpha * beta / E[sigma^2]^2
    factor_as_printed: float  # alpha * beta / E[sigma^2]^2


def ratio_bound_ges(m: MarkMoments, C: float, eps: float) -> GesRatioBound:
    """Variance ratio bound for GES against schedulers with the same remaining-demand variance.

    ``beta / rate`` is GES's remaining-demand variance. ``factor`` carries the
    4 from the centralized lower bound so that C = eps = inf gives the
    same-variance bound of Exact Scheduling.
    """
    if C < 0 or eps < 0:
        raise ValueError("C and eps must be >= 0")
    s, t = m.sigma, m.tau
    exact, drop, extend = _branches(s, t, C, eps)
    Cf = C if math.isfinite(C) else 0.0
    root = math.sqrt(eps) if math.isfinite(eps) else 1.0
    a = (np.where(exact, s * s / t, 0.0)
         + np.where(drop, Cf * (math.sqrt(eps) - Cf * t / 4) if Cf > 0 else 0.0, 0.0)
         + np.where(extend, 2 * root * s - eps * t if math.isfinite(eps) else 0.0, 0.0))
    b = (np.where(exact, s * s * t / 3, 0.0)
         + np.where(drop, Cf * Cf * t ** 3 / 12 - Cf * s * t * t / 2 + s * s * t, 0.0)
         + np.where(extend, s ** 3 / (3 * root), 0.0))
    alpha = float(np.dot(m.weight, a))
    beta = float(np.dot(m.weight, b))
    e2 = m.mean_sigma_sq
    if e2 <= 0:
        raise ValueError("need E[sigma^2] > 0")
    printed = alpha * beta / e2 ** 2
    return GesRatioBound(alpha, beta, 4 * printed, printed)


def unknown_degradation(m: MarkMoments, p_unknown: float, mode: str, c: float) -> float:
    """Extra capacity variance when a fraction of jobs hide their requirements.

    Hidden jobs run at the flat fallback rate ``c``: until their deadline
    under soft demand, until completion under soft deadline.
    """
    if not 0 <= p_unknown <= 1:
        raise ValueError("p_unknown must lie in [0, 1]")
    if c < 0:
        raise ValueError("c must be >= 0")
    if mode == "soft_demand":
        if c == 0:
            extra = lambda s, t: -s * s / t
        else:
            extra = lambda s, t: c * c * np.minimum(t, s / c) - s * s / t
    elif mode == "soft_deadline":
        extra = lambda s, t: c * s - s * s / t
    else:
        raise ValueError("mode must be 'soft_demand' or 'soft_deadline'")
    return m.rate * p_unknown * m.expect(extra)


# ---------------------------------------------------------------- generic moment integral


RateShape = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def campbell_moments(rate: RateShape, m: MarkMoments,
                     lower: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
                     n_x: int = 4000) -> tuple[float, float]:
    """Stationary mean and variance of capacity for a per-job rate shape.

    ``rate(sigma, tau, x)`` is the rate of a job with time-to-deadline ``x``;
    it is integrated over ``x`` from ``lower(sigma, tau)`` (default 0) up to
    ``tau`` by the midpoint rule, then averaged over the marks.
    """
    first = np.empty(m.n_samples)
    second = np.empty(m.n_samples)
    u = (np.arange(n_x) + 0.5) / n_x
    chunk = max(1, 2_000_000 // n_x)
    for i in range(0, m.n_samples, chunk):
        s = m.sigma[i:i + chunk, None]
        t = m.tau[i:i + chunk, None]
        lo = np.zeros_like(t) if lower is None else np.asarray(lower(s, t), dtype=float)
        width = t - lo
        x = t - u[None, :] * width  # walk from arrival toward the end of service
        v = np.asarray(rate(s, t, x), dtype=float)
        first[i:i + chunk] = (v.mean(axis=1, keepdims=True) * width)[:, 0]
        second[i:i + chunk] = ((v * v).mean(axis=1, keepdims=True) * width)[:, 0]
    if not (np.all(np.isfinite(first)) and np.all(np.isfinite(second))):
        raise ValueError("rate shape integral is not finite")
    return m.rate * float(np.dot(m.weight, first)), m.rate * float(np.dot(m.weight, second))


def ges_rate_shape(C: float, eps: float) -> tuple[RateShape, Callable]:
    """GES as a rate shape over time-to-deadline, plus where its service ends."""
    half = C / 2
    root = math.sqrt(eps)

    def flat_rate(s, t):
        ratio = s / t
        return np.where(ratio <= min(half, root), ratio, np.where(half <= root, half, root))

    def shape(s, t, x):
        return np.broadcast_to(flat_rate(s, t), x.shape)

    def lower(s, t):
        keep_on = (s / t > root) & (root < half)
        return t - np.where(keep_on, s / max(root, 1e-300), t)

    return shape, lower


class BoundCheck(NamedTuple):
    var_P: float
    bound: float
    se: float  # standard error of ``bound`` from arrival fluctuations

    @property
    def z(self) -> float:
        return (self.var_P - self.bound) / self.se if self.se > 0 else math.inf


def centralized_bound_check(arrival: np.ndarray, demand: np.ndarray, P: np.ndarray, X: np.ndarray,
                            dt: float, burn_in: float = 0.0) -> BoundCheck:
    """Compare a run's capacity variance with the centralized lower bound at its own var_X.

    Over a window of length T the sample covariance of P and X equals
    sum(sigma^2)/(2T) plus sum(sigma_k * (X before arrival k - mean X))/T plus
    boundary terms. The first part plays the role of Lambda E[sigma^2] / 2 in
    the stationary bound. The second is zero-mean noise, and its root sum of
    squares gives the standard error.
    """
    first = int(math.ceil(burn_in / dt - 1e-9))
    P = np.asarray(P, dtype=float)[first:]
    X = np.asarray(X, dtype=float)[first:]
    if len(P) < 2:
        raise ValueError("need at least two samples after burn-in")
    T = len(P) * dt
    step = np.floor(np.asarray(arrival, dtype=float) / dt + 1e-9).astype(np.int64) - first
    keep = (step >= 0) & (step < len(P))
    s = np.asarray(demand, dtype=float)[keep]
    step = step[keep]
    arrived = np.bincount(step, weights=s, minlength=len(P))
    var_x = float(X.var())
    if var_x <= 0:
        raise ValueError("remaining demand does not vary over the window")
    x_before = (X - arrived)[step] - X.mean()
    half = float((s * s).sum()) / (2 * T)
    half_se = math.sqrt(float((s * s * x_before * x_before).sum())) / T
    m = MarkMoments.from_samples(len(s) / T, s, np.ones(len(s))) if len(s) else None
    bound = lower_bound_centralized(m, var_x) if m is not None else 0.0
    return BoundCheck(float(P.var()), bound, 2 * half * half_se / var_x)
