"""Command-line entry point: ``ecstore <subcommand> SCENARIO ...``.

Every subcommand writes a JSON document carrying ``schema_version``, the
tool version and the fully resolved parameters.  Exit codes: 0 success,
2 validation error, 3 infeasible or unstable workload, 4 non-convergence,
5 bound violation under ``simulate --check-bound``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .bound import check_placement, file_bounds, system_objective
from .model import JlcmParams, Scenario, ScenarioError, validate_scenario
from .optimizer import InfeasibleWorkloadError, Solution, max_spread_pi, run_jlcm
from .queueing import UnstableError
from .scheduling import InfeasibleRowError, decompose_matrix, marginals_of
from .simulator import SimConfig, SimulationError, compare_bound_vs_sim, simulate

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3
EXIT_NOT_CONVERGED = 4
EXIT_BOUND_VIOLATION = 5

TRACE_COLUMNS = ("iter", "objective", "modified_objective", "max_rho")
SWEEP_COLUMNS = ("theta", "latency_term", "cost_term", "total", "mean_n", "status")
LATENCY_COLUMNS = ("file_id", "arrival_time", "latency")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class SweepSpec:
    theta_values: tuple[float, ...]
    output: Path

    def __post_init__(self):
        thetas = tuple(float(t) for t in self.theta_values)
        if not thetas:
            raise CliError("sweep needs at least one theta value")
        if any(b <= a for a, b in zip(thetas, thetas[1:])):
            raise CliError("theta values must be strictly increasing")
        if any(not t >= 0 for t in thetas):
            raise CliError("theta values must be nonnegative")
        object.__setattr__(self, "theta_values", thetas)


# ---------------------------------------------------------------------------
# documents


def _clean(value: Any) -> Any:
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    return value


def _document(command: str, params: dict, result: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tool": "ecstore",
        "version": __version__,
        "command": command,
        "params": _clean(params),
        "result": _clean(result),
    }


def _emit(doc: dict, out: Path | None):
    text = json.dumps(doc, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _load_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None


def _load_scenario(path: Path) -> Scenario:
    return validate_scenario(_load_json(path))


def _load_pi(path: Path, scenario: Scenario) -> np.ndarray:
    """Placement matrix from a bare nested list or any document holding ``pi``."""
    raw = _load_json(path)
    if isinstance(raw, dict):
        raw = raw.get("result", raw)
        if "pi" not in raw:
            raise CliError(f"{path}: no 'pi' entry")
        raw = raw["pi"]
    try:
        pi = np.array(raw, dtype=float)
    except (TypeError, ValueError):
        raise CliError(f"{path}: pi must be a numeric matrix") from None
    return check_placement(pi, scenario)


def _pi_source(args, scenario: Scenario) -> tuple[np.ndarray, str]:
    if args.uniform:
        return max_spread_pi(scenario), "uniform"
    if args.pi is None:
        raise CliError("give --pi PATH or --uniform")
    return _load_pi(args.pi, scenario), str(args.pi)


def _solution_doc(sol: Solution) -> dict:
    return {
        "pi": sol.pi,
        "z": sol.z,
        "n": sol.n,
        "placement": sol.placement,
        "objective": {**asdict(sol.objective), "total": sol.objective.total},
        "converged": sol.converged,
        "iterations": sol.iterations,
    }


def _write_csv(path: Path, header: Sequence[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    sc = _load_scenario(args.scenario)
    result = {"valid": True, "nodes": sc.m, "files": sc.r, "total_rate": sc.total_rate,
              "capacity": float(sc.mu.sum()), "mean_utilization": float(sc.lam @ sc.fanout / sc.mu.sum())}
    _emit(_document("validate", {"scenario": str(args.scenario)}, result), args.out)
    return EXIT_OK


def cmd_bound(args) -> int:
    sc = _load_scenario(args.scenario)
    pi, source = _pi_source(args, sc)
    bounds = file_bounds(pi, sc)
    obj = system_objective(pi, sc)
    result = {
        "files": [{"id": f.id, "z": b.z, "bound": b.bound} for f, b in zip(sc.files, bounds)],
        "system": {**asdict(obj), "total": obj.total},
    }
    params = {"scenario": str(args.scenario), "pi": source, "optimizer": asdict(sc.optimizer)}
    _emit(_document("bound", params, result), args.out)
    return EXIT_OK


def _params_from_args(args, scenario: Scenario) -> JlcmParams:
    changes = {name: getattr(args, name) for name in ("theta", "beta", "epsilon", "max_outer_iters")
               if getattr(args, name, None) is not None}
    try:
        return replace(scenario.optimizer, **changes)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def cmd_optimize(args) -> int:
    sc = _load_scenario(args.scenario)
    params = _params_from_args(args, sc)
    pi_init = _load_pi(args.init, sc) if args.init else None
    sol = run_jlcm(sc, params, pi_init=pi_init)
    if args.trace:
        _write_csv(args.trace, TRACE_COLUMNS,
                   ([row.iteration, _fmt(row.objective), _fmt(row.modified_objective), _fmt(row.max_rho)]
                    for row in sol.trace))
    doc = _document("optimize", {"scenario": str(args.scenario), "optimizer": asdict(params)},
                    _solution_doc(sol))
    _emit(doc, args.out)
    if not sol.converged:
        print(f"error: no convergence within {params.max_outer_iters} outer iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _sweep_row(theta: float, sol: Solution | None, error: str | None = None) -> list:
    if sol is None:
        return [_fmt(theta), "", "", "", "", f"error: {error}"]
    o = sol.objective
    status = "ok" if sol.converged else "not_converged"
    return [_fmt(theta), _fmt(o.latency_term), _fmt(o.cost_term), _fmt(o.total),
            _fmt(np.mean(sol.n)), status]


def _solve_one(scenario: Scenario, params: JlcmParams, pi_init=None) -> tuple[Solution | None, str | None]:
    try:
        return run_jlcm(scenario, params, pi_init=pi_init), None
    except (UnstableError, InfeasibleWorkloadError, ValueError) as exc:
        return None, str(exc)


def _solve_theta(payload):
    scenario, params = payload
    return _solve_one(scenario, params)


def run_sweep(scenario: Scenario, spec: SweepSpec, base: JlcmParams | None = None,
              warm_start: bool = True, jobs: int = 1) -> list[tuple[float, Solution | None, str | None]]:
    """Solve for each theta; warm starts chain the solutions in order."""
    base = base or scenario.optimizer
    params = [replace(base, theta=t) for t in spec.theta_values]
    if not warm_start and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_theta, [(scenario, p) for p in params]))
        return [(p.theta, *res) for p, res in zip(params, results)]
    out = []
    pi = None
    for p in params:
        sol, err = _solve_one(scenario, p, pi)
        if warm_start and sol is not None:
            pi = sol.pi
        out.append((p.theta, sol, err))
    return out


def cmd_sweep(args) -> int:
    sc = _load_scenario(args.scenario)
    spec = SweepSpec(tuple(args.thetas), args.csv)
    base = _params_from_args(args, sc)
    rows = run_sweep(sc, spec, base, warm_start=not args.no_warm_start, jobs=args.jobs)
    _write_csv(spec.output, SWEEP_COLUMNS, (_sweep_row(t, s, e) for t, s, e in rows))
    result = {"rows": [
        {"theta": t, "status": "error" if s is None else ("ok" if s.converged else "not_converged"),
         **({} if s is None else {"latency_term": s.objective.latency_term,
                                  "cost_term": s.objective.cost_term,
                                  "total": s.objective.total, "n": s.n})}
        for t, s, _ in rows]}
    params = {"scenario": str(args.scenario), "optimizer": asdict(base), "thetas": spec.theta_values,
              "warm_start": not args.no_warm_start, "csv": str(spec.output)}
    _emit(_document("sweep", params, result), args.out)
    return EXIT_OK


def cmd_decompose(args) -> int:
    sc = _load_scenario(args.scenario)
    pi, source = _pi_source(args, sc)
    dists = decompose_matrix(pi, sc.fanout)
    files = []
    for f, row, dist in zip(sc.files, pi, dists):
        ids = [sc.nodes[j].id for j in range(sc.m)]
        files.append({
            "id": f.id,
            "k": dist.k,
            "atoms": [{"nodes": [ids[j] for j in s], "prob": p} for s, p in dist.atoms()],
            "max_marginal_error": float(np.max(np.abs(marginals_of(dist, sc.m) - row))),
        })
    _emit(_document("decompose", {"scenario": str(args.scenario), "pi": source}, {"files": files}), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = _load_scenario(args.scenario)
    pi, source = _pi_source(args, sc)
    opts = sc.simulator
    try:
        cfg = SimConfig(
            horizon=args.horizon if args.horizon is not None else opts.horizon_sec,
            warmup=args.warmup if args.warmup is not None else opts.warmup_sec,
            replications=args.replications if args.replications is not None else opts.replications,
            seed=args.seed if args.seed is not None else opts.seed,
            policy=args.policy,
            dists=tuple(decompose_matrix(pi, sc.fanout)),
            keep_latencies=args.latency_csv is not None,
        )
    except SimulationError as exc:
        raise CliError(str(exc)) from None
    params = {"scenario": str(args.scenario), "pi": source,
              "simulator": {"horizon": cfg.horizon, "warmup": cfg.warmup, "replications": cfg.replications,
                            "seed": cfg.seed, "policy": cfg.policy},
              "check_bound": args.check_bound}
    violations = 0
    if args.check_bound:
        if cfg.policy != "probabilistic":
            raise CliError("--check-bound needs the probabilistic policy")
        cmp = compare_bound_vs_sim(sc, pi, cfg)
        report = cmp.report
        result = {"report": report.to_dict(), "bound_check": cmp.to_dict()}
        violations = len(cmp.violations)
    else:
        report = simulate(sc, cfg)
        result = {"report": report.to_dict()}
    if args.latency_csv:
        _write_csv(args.latency_csv, LATENCY_COLUMNS,
                   ([fid, _fmt(a), _fmt(x)] for fid, a, x in report.latencies))
    _emit(_document("simulate", params, result), args.out)
    if violations:
        print(f"error: {violations} file(s) exceed the analytic bound", file=sys.stderr)
        return EXIT_BOUND_VIOLATION
    return EXIT_OK


# ---------------------------------------------------------------------------


def _thetas(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad theta list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecstore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("scenario", type=Path, help="scenario JSON document")
        p.add_argument("--out", type=Path, help="write the result document here instead of stdout")
        p.set_defaults(func=func)
        return p

    def pi_args(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--pi", type=Path, help="placement matrix or solution document")
        g.add_argument("--uniform", action="store_true", help="use pi = k_i/m on every node")

    def opt_args(p):
        p.add_argument("--theta", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--max-outer-iters", type=int)

    add("validate", cmd_validate, "check a scenario document")
    p = add("bound", cmd_bound, "per-file and system latency bounds")
    pi_args(p)
    p = add("optimize", cmd_optimize, "joint latency-cost optimization")
    opt_args(p)
    p.add_argument("--init", type=Path, help="initial placement (matrix or solution document)")
    p.add_argument("--trace", type=Path, help="per-iteration trace CSV")
    p = add("sweep", cmd_sweep, "latency-cost tradeoff over theta")
    opt_args(p)
    p.add_argument("--thetas", type=_thetas, required=True, help="comma-separated increasing theta values")
    p.add_argument("--csv", type=Path, required=True, help="tradeoff table output")
    p.add_argument("--no-warm-start", action="store_true")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (only without warm start)")
    p = add("decompose", cmd_decompose, "subset distributions for a placement")
    pi_args(p)
    p = add("simulate", cmd_simulate, "discrete-event simulation of a placement")
    pi_args(p)
    p.add_argument("--policy", choices=("probabilistic", "central_queue"), default="probabilistic")
    p.add_argument("--horizon", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--latency-csv", type=Path, help="per-request latencies CSV")
    p.add_argument("--check-bound", action="store_true", help="compare file means with the analytic bound")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (UnstableError, InfeasibleWorkloadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ScenarioError, InfeasibleRowError, SimulationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
