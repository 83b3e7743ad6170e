"""Command-line front end.

Subcommands: generate, simulate, compare, offline, maxstab, analyze. Exit
codes: 0 success, 2 invalid input, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analytics, fluid
from .engine import StrictViolation, simulate, summarize
from .model import (ArrivalModel, JobSet, ModelError, TraceParseError, ValidationError, load_model,
                    load_trace, sample_arrivals, validate_jobset, write_trace)
from .policies import PolicyConfig, parse_policy
from .qp import ConvergenceError, InfeasibleJob, offline_trace, simulate_mpc

EXIT_OK, EXIT_INVALID, EXIT_NO_CONVERGENCE = 0, 2, 3

RESULT_COLUMNS = ["instance", "seed", "policy", "var_P", "mean_P", "var_X", "U", "W", "cost", "ratio"]

DEFAULT_GRIDS = {
    "c": tuple(round(0.30 + 0.05 * i, 2) for i in range(15)),  # equal: 0.30 .. 1.00
    "mu": tuple(round(1.0 + 0.05 * i, 2) for i in range(13)),  # espc: 1.00 .. 1.60
    "capacity": tuple(round(0.5 + 0.25 * i, 2) for i in range(7)),  # edf/llf/fair: multiples of mean load
}
TUNED_FIELD = {"equal": "c", "espc": "mu", "edf": "capacity", "llf": "capacity", "fair": "capacity"}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    """Everything ``compare`` needs; each field has a CLI flag of the same name."""

    model: str | None = None
    trace: str | None = None
    policies: list[str] = field(default_factory=lambda: ["exact"])
    dt: float = 1.0
    burn_in: float = 0.0
    seeds: int = 1
    seed: int = 0
    C: list[float] = field(default_factory=lambda: [math.inf])
    eps: list[float] = field(default_factory=lambda: [math.inf])
    mu: float | None = None
    ratio_against: str = "offline"
    tol: float = 1e-8
    max_iters: int = 50000
    tune: bool = False
    grid_c: tuple[float, ...] = DEFAULT_GRIDS["c"]
    grid_mu: tuple[float, ...] = DEFAULT_GRIDS["mu"]
    grid_capacity: tuple[float, ...] = DEFAULT_GRIDS["capacity"]
    out: str = "results"

    def validate(self) -> None:
        if not self.policies:
            raise UsageError("need at least one policy")
        if not self.dt > 0:
            raise UsageError("dt must be > 0")
        if self.seeds < 1:
            raise UsageError("seed count must be >= 1")
        if (self.model is None) == (self.trace is None):
            raise UsageError("give exactly one of --model and --trace")
        for p in self.policies:
            _policy_spec(p)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        """Read an ``[experiment]`` section of flat ``key = value`` lines."""
        cp = configparser.ConfigParser()
        if not cp.read(path, encoding="utf-8") or "experiment" not in cp:
            raise UsageError(f"{path}: need an [experiment] section")
        sec = cp["experiment"]
        cfg = cls()
        for key, raw in sec.items():
            key = key.replace("-", "_")
            key = "C" if key == "c" else key  # configparser lowercases keys
            if not hasattr(cfg, key):
                raise UsageError(f"{path}: unknown key {key!r}")
            setattr(cfg, key, _coerce(key, raw))
        return cfg


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _coerce(key: str, raw: str):
    if key in ("model", "trace", "ratio_against", "out"):
        return raw.strip()
    if key == "policies":
        return _split_policies(raw)
    if key in ("dt", "burn_in", "tol"):
        return float(raw)
    if key == "mu":
        return float(raw)
    if key in ("seeds", "seed", "max_iters"):
        return int(raw)
    if key in ("C", "eps"):
        return _floats(raw)
    if key == "tune":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if key.startswith("grid_"):
        return tuple(_floats(raw))
    raise UsageError(f"unknown key {key!r}")


def _split_policies(text: str) -> list[str]:
    """Split on ';' or on commas that start a new policy name."""
    if ";" in text:
        return [p.strip() for p in text.split(";") if p.strip()]
    out: list[str] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if out and "=" in part and ":" not in part:
            out[-1] += "," + part
        else:
            out.append(part)
    return out


def _policy_spec(text: str) -> PolicyConfig | str:
    name = text.strip().lower()
    if name in ("offline", "mpc"):
        return name
    return parse_policy(text)


# ---------------------------------------------------------------- helpers


def _atomic_write(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))


def _load_jobs(model: str | None, trace: str | None, seed: int) -> tuple[JobSet, ArrivalModel | None]:
    if trace is not None:
        jobs = load_trace(trace)
        problems = validate_jobset(jobs)
        if problems:
            raise ValidationError(problems)
        return jobs, None
    if model is None:
        raise UsageError("give --model or --trace")
    m = load_model(model)
    return sample_arrivals(m, seed), m


def _mean_load(jobs: JobSet, model: ArrivalModel | None) -> float:
    """Target capacity for ES-PC and the unit for capacity grids."""
    if model is not None:
        return model.mean_rate * model.marks.demand.mean
    if len(jobs) == 0 or jobs.horizon <= 0:
        return 0.0
    return float(jobs.arrays()["demand"].sum() / jobs.horizon)


def _run(spec: PolicyConfig | str, jobs: JobSet, cfg: ExperimentConfig, load: float):
    if spec == "offline":
        return offline_trace(jobs, cfg.dt, cfg.tol, cfg.max_iters, on_fail="raise")[0]
    if spec == "mpc":
        return simulate_mpc(jobs, cfg.dt, cfg.tol, cfg.max_iters, on_fail="raise")
    if spec.kind in ("edf", "llf", "fair") and cfg.tune:
        spec = replace(spec, capacity=spec.capacity * load)
    return simulate(jobs, spec, cfg.dt, p_bar=load)


def _label(spec: PolicyConfig | str, C: float, eps: float, soft: bool) -> str:
    base = spec if isinstance(spec, str) else spec.label
    return f"{base}[C={_fmt(C)},eps={_fmt(eps)}]" if soft else base


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    m = load_model(args.model)
    jobs = sample_arrivals(m, args.seed)
    out = Path(args.out)
    _atomic_write(out, lambda tmp: write_trace(jobs, tmp))
    print(f"jobs={len(jobs)}", f"rejected={jobs.rejected}", f"out={out}", sep="\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    jobs, model = _load_jobs(args.model, args.trace, args.seed)
    if args.C is not None or args.eps is not None:
        jobs = jobs.with_costs(args.C, args.eps)
    policy = parse_policy(args.policy)
    if args.mu is not None:
        policy = replace(policy, mu=args.mu)
    trace = simulate(jobs, policy, args.dt, p_bar=_mean_load(jobs, model))
    metrics = summarize(trace, args.burn_in)
    if args.out:
        _atomic_write(Path(args.out), trace.write_csv)
    for k, v in metrics.as_dict().items():
        print(f"{k}={_fmt(v)}")
    return EXIT_OK


def _instances(cfg: ExperimentConfig):
    if cfg.trace is not None:
        jobs, _ = _load_jobs(None, cfg.trace, 0)
        yield 0, 0, jobs, None
        return
    for i in range(cfg.seeds):
        seed = cfg.seed + i
        jobs, model = _load_jobs(cfg.model, None, seed)
        yield i, seed, jobs, model


def _expand(cfg: ExperimentConfig) -> list[tuple[PolicyConfig | str, float, float]]:
    """Policy runs, with ES-PC's mu from the flag and GES-type policies over the cost sweep."""
    runs = []
    for text in cfg.policies:
        spec = _policy_spec(text)
        if isinstance(spec, PolicyConfig) and spec.kind == "espc" and cfg.mu is not None:
            spec = replace(spec, mu=cfg.mu)
        if isinstance(spec, PolicyConfig) and spec.kind in ("ges", "ges_unknown"):
            runs += [(spec, C, e) for C in cfg.C for e in cfg.eps]
        else:
            runs.append((spec, math.inf, math.inf))
    return runs


def _candidates(spec: PolicyConfig | str, cfg: ExperimentConfig) -> list[PolicyConfig | str]:
    if not cfg.tune or isinstance(spec, str) or spec.kind not in TUNED_FIELD:
        return [spec]
    name = TUNED_FIELD[spec.kind]
    if spec.kind == "espc" and cfg.mu is not None:
        return [spec]
    grid = getattr(cfg, f"grid_{name}")
    return [replace(spec, **{name: float(v)}) for v in grid]


def run_compare(cfg: ExperimentConfig) -> tuple[list[dict], list[dict], list[dict]]:
    """Run every policy on every instance; returns (results, summary, tuning rows)."""
    cfg.validate()
    runs = _expand(cfg)
    baseline = _policy_spec(cfg.ratio_against)
    instances = list(_instances(cfg))
    # metrics[(run index, candidate index)] -> list over instances
    metrics: dict[tuple[int, int], list] = {}
    labels: dict[tuple[int, int], str] = {}
    specs: dict[tuple[int, int], PolicyConfig | str] = {}
    base_metrics = []
    for inst, seed, jobs, model in instances:
        load = _mean_load(jobs, model)
        base_jobs = jobs
        base_metrics.append(summarize(_run(baseline, base_jobs, cfg, load), cfg.burn_in))
        for r, (spec, C, eps) in enumerate(runs):
            soft = math.isfinite(C) or math.isfinite(eps)
            run_jobs = jobs.with_costs(C, eps) if soft else jobs
            for c, cand in enumerate(_candidates(spec, cfg)):
                metrics.setdefault((r, c), []).append(summarize(_run(cand, run_jobs, cfg, load), cfg.burn_in))
                labels[(r, c)] = _label(cand, C, eps, soft)
                specs[(r, c)] = cand

    tuning: list[dict] = []
    chosen: dict[int, int] = {}
    for r in range(len(runs)):
        keys = sorted(c for (rr, c) in metrics if rr == r)
        means = {c: float(np.mean([m.cost for m in metrics[(r, c)]])) for c in keys}
        chosen[r] = min(keys, key=lambda c: (means[c], c))
        if len(keys) > 1:
            name = TUNED_FIELD[specs[(r, 0)].kind]
            tuning += [{"policy": labels[(r, c)], "parameter": name, "value": float(getattr(specs[(r, c)], name)),
                        "mean_cost": means[c], "chosen": int(c == chosen[r])} for c in keys]

    results: list[dict] = []
    for i, (inst, seed, _, _) in enumerate(instances):
        base_cost = base_metrics[i].cost
        for r in range(len(runs)):
            m = metrics[(r, chosen[r])][i]
            results.append({
                "instance": inst, "seed": seed, "policy": labels[(r, chosen[r])],
                "var_P": m.var_P, "mean_P": m.mean_P, "var_X": m.var_X,
                "U": m.mean_U_rate, "W": m.mean_W_rate, "cost": m.cost,
                "ratio": m.cost / base_cost if base_cost > 0 else math.nan,
            })
    summary = []
    for r in range(len(runs)):
        label = labels[(r, chosen[r])]
        ratios = np.array([row["ratio"] for row in results if row["policy"] == label], dtype=float)
        costs = np.array([row["cost"] for row in results if row["policy"] == label], dtype=float)
        n = len(ratios)
        summary.append({
            "policy": label, "n": n, "mean_ratio": float(np.nanmean(ratios)),
            "se_ratio": float(np.nanstd(ratios, ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
            "mean_cost": float(costs.mean()),
        })
    return results, summary, tuning


def _write_rows(path: Path, columns: Sequence[str], rows: list[dict]) -> None:
    def write(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    _atomic_write(path, write)


def cmd_compare(args) -> int:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    for key in ("model", "trace", "dt", "burn_in", "seeds", "seed", "mu", "ratio_against", "tol",
                "max_iters", "out"):
        value = getattr(args, key)
        if value is not None:
            setattr(cfg, key, value)
    if args.policies is not None:
        cfg.policies = _split_policies(args.policies)
    if args.C is not None:
        cfg.C = _floats(args.C)
    if args.eps is not None:
        cfg.eps = _floats(args.eps)
    if args.tune:
        cfg.tune = True
    results, summary, tuning = run_compare(cfg)
    out = Path(cfg.out)
    _write_rows(out / "results.csv", RESULT_COLUMNS, results)
    _write_rows(out / "summary.csv", ["policy", "n", "mean_ratio", "se_ratio", "mean_cost"], summary)
    if tuning:
        _write_rows(out / "tuning.csv", ["policy", "parameter", "value", "mean_cost", "chosen"], tuning)
    for row in summary:
        print(f"{row['policy']}: mean_ratio={row['mean_ratio']:.4f} se={row['se_ratio']:.4f} n={row['n']}")
    return EXIT_OK


def cmd_offline(args) -> int:
    jobs, _ = _load_jobs(args.model, args.trace, args.seed)
    if args.mpc:
        trace = simulate_mpc(jobs, args.dt, args.tol, args.max_iters, on_fail="raise")
        if args.out:
            _atomic_write(Path(args.out), trace.write_csv)
        m = summarize(trace)
        print(f"objective={_fmt(m.var_P)}", f"iterations={trace.extras.get('iterations', 0)}", sep="\n")
        return EXIT_OK
    trace, rm = offline_trace(jobs, args.dt, args.tol, args.max_iters, on_fail="raise")
    if args.out:
        _atomic_write(Path(args.out), rm.write_csv)
    print(f"objective={_fmt(rm.objective())}",
          f"iterations={rm.info.iterations if rm.info else 0}",
          f"kkt_residual={_fmt(rm.info.residual if rm.info else 0.0)}", sep="\n")
    return EXIT_OK


def cmd_maxstab(args) -> int:
    path = args.fluid or args.trace
    if path is None:
        raise UsageError("give --fluid (or --trace) with a fluid instance CSV")
    inst = fluid.load_fluid(path)
    if args.method == "algorithm":
        prof = fluid.run_maxstab(inst)
        alpha, beta = 1.0, 0.0
    else:
        alpha, beta = args.alpha, args.beta
        prof = fluid.solve_fluid_qp(inst, alpha, beta, tol=args.tol, max_iters=args.max_iters, on_fail="raise")
    if args.out:
        _atomic_write(Path(args.out), prof.write_csv)
    report = fluid.check_pareto_conditions(inst, prof, alpha, beta, tol=args.check_tol)
    print(f"objective={_fmt(prof.objective(alpha, beta))}", f"peak={_fmt(prof.peak())}",
          f"pareto={'pass' if report.passed else 'fail'}", sep="\n")
    for t1, t2, level in prof.intervals:
        print(f"interval={_fmt(t1)},{_fmt(t2)},{_fmt(level)}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    model = load_model(args.model)
    m = analytics.MarkMoments.from_model(model, n_samples=args.n_samples, seed=args.seed, method=args.method)
    C = model.marks.cost_demand if args.C is None else args.C
    eps = model.marks.cost_deadline if args.eps is None else args.eps
    lines = {
        "rate": m.rate, "mean_sigma": m.mean_sigma, "mean_sigma_sq": m.mean_sigma_sq,
        "mean_sigma_sq_over_tau": m.mean_sigma_sq_over_tau, "mean_sigma_sq_tau": m.mean_sigma_sq_tau,
        "mean_exact": analytics.stationary_mean(m, m.mean_sigma),
        "var_exact": analytics.var_exact(m), "var_x_exact": analytics.var_x_exact(m),
    }
    if m.method == "monte_carlo":
        lines["var_exact_se"] = m.rate * m.expect_se(lambda s, t: s * s / t)[1]
    bound = analytics.ratio_bound_exact(m)
    lines["bound_cor2"] = bound.general
    lines["bound_same_var_x"] = bound.same_var_x
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", analytics.ThresholdWarning)
        parts = analytics.ges_cost_components(m, C, eps)
        lines["cost_ges"] = analytics.cost_ges(m, C, eps)
    lines["ges_var"], lines["ges_unmet"], lines["ges_extension"] = parts.variance, parts.unmet, parts.extension
    lines["bound_ges"] = analytics.ratio_bound_ges(m, C, eps).factor
    if model.marks.p_known < 1:
        for mode in ("soft_demand", "soft_deadline"):
            lines[f"unknown_{mode}"] = analytics.unknown_degradation(m, 1 - model.marks.p_known, mode,
                                                                     args.fallback_c)
    for k, v in lines.items():
        print(f"{k}={_fmt(float(v))}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varsched", description="Deadline scheduling workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def source(sp, seed_default=0):
        sp.add_argument("--model", help="model file (INI)")
        sp.add_argument("--trace", help="trace CSV")
        sp.add_argument("--seed", type=int, default=seed_default, help="seed for --model")

    g = sub.add_parser("generate", help="sample a trace from a model")
    g.add_argument("--model", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("simulate", help="run one policy")
    source(s)
    s.add_argument("--policy", default="exact", help="e.g. exact, equal:c=0.6,mode=strict")
    s.add_argument("--dt", type=float, default=1.0)
    s.add_argument("--burn-in", dest="burn_in", type=float, default=0.0)
    s.add_argument("--C", type=float, help="unit cost of unmet demand for every job")
    s.add_argument("--eps", type=float, help="unit cost of deadline extension for every job")
    s.add_argument("--mu", type=float, help="ES-PC boost factor")
    s.add_argument("--out", help="capacity trace CSV")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="run several policies on many instances")
    c.add_argument("--config", help="experiment INI with an [experiment] section")
    c.add_argument("--model")
    c.add_argument("--trace")
    c.add_argument("--policies", "--policy", dest="policies", help="comma or ';' separated policy list")
    c.add_argument("--dt", type=float)
    c.add_argument("--burn-in", dest="burn_in", type=float)
    c.add_argument("--seeds", type=int, help="number of instances")
    c.add_argument("--seed", type=int, help="base seed")
    c.add_argument("--C", help="comma list of unmet-demand costs (GES sweep)")
    c.add_argument("--eps", help="comma list of deadline-extension costs (GES sweep)")
    c.add_argument("--mu", type=float)
    c.add_argument("--ratio-against", dest="ratio_against")
    c.add_argument("--tune", action="store_true", help="grid-search baseline parameters on the batch")
    c.add_argument("--tol", type=float)
    c.add_argument("--max-iters", dest="max_iters", type=int)
    c.add_argument("--out", help="output directory")
    c.set_defaults(func=cmd_compare)

    o = sub.add_parser("offline", help="offline optimum (or MPC) for one instance")
    source(o)
    o.add_argument("--dt", type=float, default=1.0)
    o.add_argument("--tol", type=float, default=1e-8)
    o.add_argument("--max-iters", dest="max_iters", type=int, default=50000)
    o.add_argument("--mpc", action="store_true", help="run receding-horizon MPC instead")
    o.add_argument("--out", help="rate CSV (offline) or capacity trace CSV (MPC)")
    o.set_defaults(func=cmd_offline)

    x = sub.add_parser("maxstab", help="fluid max-stability profiles")
    x.add_argument("--fluid", help="fluid instance CSV")
    x.add_argument("--trace", help="alias for --fluid")
    x.add_argument("--method", choices=("algorithm", "qp"), default="algorithm")
    x.add_argument("--alpha", type=float, default=1.0)
    x.add_argument("--beta", type=float, default=0.0)
    x.add_argument("--tol", type=float, default=1e-10)
    x.add_argument("--max-iters", dest="max_iters", type=int, default=100000)
    x.add_argument("--check-tol", dest="check_tol", type=float, default=1e-5)
    x.add_argument("--out", help="profile CSV")
    x.set_defaults(func=cmd_maxstab)

    a = sub.add_parser("analyze", help="closed-form costs and bounds for a model")
    a.add_argument("--model", required=True)
    a.add_argument("--C", type=float)
    a.add_argument("--eps", type=float)
    a.add_argument("--method", choices=("monte_carlo", "quadrature"), default="monte_carlo")
    a.add_argument("--n-samples", dest="n_samples", type=int, default=1_000_000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--fallback-c", dest="fallback_c", type=float, default=0.5)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except ValidationError as exc:
        print(f"error: invalid instance: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ModelError, TraceParseError, fluid.FluidError, InfeasibleJob,
            StrictViolation, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
