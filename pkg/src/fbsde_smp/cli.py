"""Command-line experiment runner.

Every subcommand builds an experiment document (problem, seed, options),
validates it against a JSON schema, runs, and emits a JSON report with sorted
keys plus CSV tables.  Exit status is 0 when every check in the report holds,
1 when a check fails, 2 for usage errors and 3 for solver failures.
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Mapping

import click
import jsonschema
import numpy as np

from .core import InvalidArgument, NumericDivergence
from .problem import PRESETS, PROBLEM_SCHEMA, ConfigError, load_problem, validate_document

EXIT_FAIL, EXIT_USAGE, EXIT_SOLVER = 1, 2, 3

_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 1}
OPTION_SCHEMAS: dict[str, dict[str, Any]] = {
    "solve": {"method": {"enum": ["local", "picard"]}, "tol": {"type": "number", "exclusiveMinimum": 0}},
    "adjoint": {},
    "check-mp": {"mode": {"enum": ["auto", "global", "global-linear-z", "local", "lq"]},
                 "tolerance": {"type": "number", "minimum": 0}, "paths": _INT},
    "spike-orders": {"eps_list": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                     "paths": _INT, "beta": {"type": "array", "items": {"enum": [2, 4]}, "minItems": 1}},
    "lq": {"paths": _INT, "pieces": {"type": "integer", "minimum": 0, "maximum": 4},
           "tolerance": {"type": "number", "minimum": 0}},
    "example": {"pieces": {"type": "integer", "minimum": 0, "maximum": 4},
                "tolerance": {"type": "number", "minimum": 0}, "paths": _INT},
    "assumptions": {"L1": {"type": "number", "minimum": 0}, "L2": {"type": "number", "minimum": 0},
                    "L3": {"type": "number", "minimum": 0}},
}


def experiment_schema(command: str) -> dict[str, Any]:
    return {
        "type": "object", "additionalProperties": False, "required": ["problem"],
        "properties": {
            "problem": PROBLEM_SCHEMA,
            "seed": {"type": "integer", "minimum": 0},
            "output": {"type": "string"},
            "options": {"type": "object", "additionalProperties": False, "properties": OPTION_SCHEMAS[command]},
        },
    }


def validate_experiment(command: str, config: Mapping[str, Any]) -> None:
    if command not in OPTION_SCHEMAS:
        raise InvalidArgument(f"unknown command '{command}'")
    validate_document(config, experiment_schema(command))


def threads() -> int:
    """Parallelism cap from FBSDE_SMP_THREADS (default 1).  All sweeps run sequentially."""
    raw = os.environ.get("FBSDE_SMP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"expected a positive integer, got '{raw}'", "env/FBSDE_SMP_THREADS") from None
    if n < 1:
        raise ConfigError(f"expected a positive integer, got '{raw}'", "env/FBSDE_SMP_THREADS")
    return n


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def clean(obj: Any) -> Any:
    """Plain JSON types; non-finite floats become the strings "nan", "inf", "-inf"."""
    if isinstance(obj, Mapping):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return obj


def dumps(report: Mapping[str, Any]) -> str:
    return json.dumps(clean(report), sort_keys=True, indent=2) + "\n"


class RunResult:
    """Report, CSV tables (name -> (header, rows)) and the check flags."""

    def __init__(self, report: dict, tables: dict[str, tuple[list[str], list]], checks: dict[str, bool]):
        self.report = report
        self.tables = tables
        self.checks = checks

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def write(self, out: Path) -> None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(dumps(self.report))
        for name, (header, rows) in self.tables.items():
            with open(out / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for r in rows:
                    w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _solve(problem, opts, seed):
    from .fbsde import solve_coupled, solve_coupled_picard, solve_linear_oracle

    method = opts.get("method", "local")
    tree = problem.tree
    if method == "picard":
        sol = solve_coupled_picard(problem.coeffs, problem.candidate(), tree, tol=opts.get("tol", 1e-10))
    else:
        sol = solve_coupled(problem.coeffs, problem.candidate(), tree, tol=opts.get("tol", 1e-13))
    rep = {"Y0": sol.Y0, "Z0": float(sol.Z.flat[0]), "method": method,
           "picard_iterations": sol.picard_iterations, "final_residual": sol.final_residual,
           "residual_history": sol.residual_history}
    checks = {"finite": bool(np.all(np.isfinite(sol.Y.flat)) and np.all(np.isfinite(sol.Z.flat)))}
    if problem.linear is not None:
        ref = solve_linear_oracle(problem.linear, tree)
        rep["oracle_Y0"] = ref.Y0
        rep["oracle_gap"] = abs(sol.Y0 - ref.Y0)
    rows = [(k, j, problem.grid.t(k), x, y, z) for k, j, x, y, z in sol.to_rows()]
    return rep, {"nodes": (["step", "j", "t", "x", "Y", "Z"], rows)}, checks


def _adjoint(problem, opts, seed):
    from .adjoint import solve_first_order_adjoint, solve_second_order_adjoint
    from .assumptions import AssumptionInputs, check_assumptions
    from .fbsde import node_coordinates, node_times, solve_coupled

    tree = problem.tree
    opt = solve_coupled(problem.coeffs, problem.candidate(), tree)
    asm = check_assumptions(AssumptionInputs.from_problem(problem))
    bound = asm.bound_used if asm.p_bound_ok else float("nan")
    first = solve_first_order_adjoint(problem.coeffs, opt, problem.beta0, bound)
    second = solve_second_order_adjoint(problem.coeffs, opt, first)
    S = first.q.flat.size
    rep = {"p0": float(first.p.flat[0]), "q0": float(first.q.flat[0]), "P0": float(second.P.flat[0]),
           "K1_0": float(first.K1.flat[0]), "max_abs_p": float(np.max(np.abs(first.p.flat))),
           "max_abs_q": first.max_abs_q, "max_abs_P": float(np.max(np.abs(second.P.flat))),
           "min_margin": first.min_margin, "bound_used": bound,
           "K1_formula_gap": float(np.max(np.abs(first.K1.flat - first.K1_formula))),
           "q_bounded": "reported only (max_abs_q)"}
    checks = {"margin": first.min_margin >= 0.5 * problem.beta0}
    if math.isfinite(bound):
        checks["p_within_bound"] = bool(rep["max_abs_p"] <= bound + 1e-8)
    t, x = node_times(tree, tree.N - 1), node_coordinates(tree, tree.N - 1)
    step = np.concatenate([np.full(k + 1, k) for k in range(tree.N)])
    j = np.concatenate([np.arange(k + 1) for k in range(tree.N)])
    rows = list(zip(step.tolist(), j.tolist(), t, x, first.p.flat[:S], first.q.flat, first.K1.flat,
                    second.P.flat[:S]))
    return rep, {"adjoint": (["step", "j", "t", "x", "p", "q", "K1", "P"], rows)}, checks


def _check_mp(problem, opts, seed):
    from .smp import check_global_mp, check_local_mp

    mode = opts.get("mode", "auto")
    tol = opts.get("tolerance", 1e-8)
    paths = opts.get("paths", 64)
    if mode == "local":
        rep = check_local_mp(problem, tolerance=tol, paths=paths, seed=seed)
    else:
        rep = check_global_mp(problem, mode=None if mode == "auto" else mode, tolerance=tol, paths=paths,
                              seed=seed)
    header = ["step", "index", "t", "x", "u", "gap"]
    return rep.to_dict(), {"gaps": (header, list(rep.rows()))}, {"mp": rep.passed}


ORDER_RANGES = {("X", 2): (0.8, 1.2), ("X", 4): (1.7, 2.3), ("X-X1", 2): (1.8, 2.3)}


def _spike_orders(problem, opts, seed):
    from .variation import estimate_spike_orders

    betas = tuple(opts.get("beta", [2, 4]))
    rep = estimate_spike_orders(problem, opts.get("eps_list"), opts.get("paths", 100_000), seed, betas)
    checks = {}
    for (name, beta), (lo, hi) in ORDER_RANGES.items():
        if beta in betas or name == "X-X1":
            s = rep.fit(name, beta).slope
            checks[f"slope_{name}_beta{beta}"] = bool(lo <= s <= hi)
    checks["slope_Y0_remainder"] = bool(rep.fit("Y0-Y1-Y2", 1).slope > 1.15)
    slopes = [(f.name, f.beta, f.slope, f.r2) for f in rep.fits]
    return rep.to_dict(), {"spike_orders": (["statistic", "beta", "eps", "value"], rep.rows()),
                           "slopes": (["statistic", "beta", "slope", "r2"], slopes)}, checks


def _lq_common(problem, opts, seed, local_problem=None):
    from .fbsde import solve_coupled
    from .lq import lq_brute_force_cost, lq_check_mp

    if problem.lq is None:
        raise InvalidArgument("problem has no lq block")
    lq = problem.lq
    opt = solve_coupled(problem.coeffs, problem.candidate(), problem.tree)
    tol = opts.get("tolerance", 1e-8)
    rep = lq_check_mp(lq, problem, opt, tolerance=tol, paths=opts.get("paths", 64), seed=seed)
    out = {"p0": float(rep.p[0]), "P0": float(rep.P[0]), "K1_0": float(rep.K1[0]),
           "h0": float(rep.hmn.h[0, 0]), "m0": float(rep.hmn.m[0, 0]), "n0": float(rep.hmn.n[0, 0]),
           "hmn_picard_iterations": rep.hmn.picard_iterations, "hmn_direct_gap": rep.hmn.direct_gap,
           "global": {"passed": rep.passed, "worst": rep.worst,
                      "gap_by_u": {repr(k): v for k, v in rep.gap_by_u().items()}},
           "local": {"passed": rep.local_passed, "worst": rep.worst_local}}
    tables = {"lq_ode": (["t", "p", "P", "K1"], list(zip(rep.t, rep.p, rep.P, rep.K1)))}
    pieces = opts.get("pieces", 3)
    brute = None
    if pieces:
        brute = lq_brute_force_cost(lq, problem, pieces=pieces)
        out["brute_force"] = {"argmin": list(brute.argmin), "min_cost": brute.min_cost, "candidates": len(brute.controls)}
        tables["brute_force"] = (["control", "cost"], [(" ".join(repr(v) for v in c), j) for c, j in brute.table()])
    return out, tables, rep, brute


def _lq(problem, opts, seed):
    out, tables, rep, brute = _lq_common(problem, opts, seed)
    checks = {"mp": rep.passed}
    if brute is not None:
        ub = tuple(float(v) for v in rep.u_bar[:1]) * len(brute.argmin)
        checks["candidate_is_argmin"] = bool(np.allclose(brute.argmin, ub))
    return out, tables, checks


def _example(problem, opts, seed):
    from .lq import example_closed_form_gap, example_problem

    prm = {k: float(problem.params.get(k, v)) for k, v in (("a", 0.5), ("b", 1.0), ("c", 0.25), ("d", 1.0))}
    out, tables, rep, brute = _lq_common(problem, opts, seed)
    local = example_problem(**prm, T=problem.grid.T, N=problem.grid.N, domain="interval")
    from .fbsde import solve_coupled
    from .lq import lq_check_mp

    lrep = lq_check_mp(local.lq, local, solve_coupled(local.coeffs, local.candidate(), local.tree),
                       tolerance=opts.get("tolerance", 1e-8), paths=opts.get("paths", 64), seed=seed,
                       local_grid=local.control.grid())
    out["local"] = {"passed": lrep.local_passed, "worst": lrep.worst_local, "domain": [-1.0, 1.0]}
    out["params"] = prm
    checks = {"global_mp_passes": rep.passed, "local_mp_fails": not lrep.local_passed}
    if brute is not None:
        dt = problem.grid.dt
        from .lq import piecewise_control

        closed = [example_closed_form_gap(piecewise_control(c, problem.grid.N).values(), prm["c"], prm["d"], dt)
                  for c in brute.controls]
        zero = tuple(0.0 for _ in brute.argmin)
        if zero in brute.controls:
            base = brute.costs[brute.controls.index(zero)]
            diff = np.abs(np.asarray(brute.costs) - base - np.asarray(closed))
            out["brute_force"]["closed_form_max_gap"] = float(diff.max())
        checks["argmin_is_zero"] = bool(all(v == 0.0 for v in brute.argmin))
    return out, tables, checks


def _assumptions(problem, opts, seed):
    from dataclasses import replace

    from .assumptions import AssumptionInputs, check_assumptions, solve_s_l

    inp = AssumptionInputs.from_problem(problem)
    inp = replace(inp, **{k: float(v) for k, v in opts.items() if k in ("L1", "L2", "L3")})
    rep = check_assumptions(inp)
    tables = {}
    if rep.t_star < 0 and math.isfinite(rep.s0):
        t, s, l = solve_s_l(inp, check_t_star=False)
        tables["s_l"] = (["t", "s", "l"], list(zip(t, s, l)))
    return rep.to_dict(), tables, {"assumptions": rep.passed}


COMMANDS: dict[str, Callable] = {
    "solve": _solve, "adjoint": _adjoint, "check-mp": _check_mp, "spike-orders": _spike_orders,
    "lq": _lq, "example": _example, "assumptions": _assumptions,
}


def run(command: str, config: Mapping[str, Any], timing: bool = False) -> RunResult:
    """Validate ``config`` and execute ``command``; the report echoes the config."""
    validate_experiment(command, config)
    n_threads = threads()
    seed = int(config.get("seed", 0))
    opts = dict(config.get("options", {}))
    problem = load_problem(config["problem"])
    start = time.perf_counter()
    body, tables, checks = COMMANDS[command](problem, opts, seed)
    report = {"command": command, "config": clean(config), "version": _version(), "threads": n_threads,
              "results": body, "checks": checks, "passed": all(checks.values())}
    if timing:
        report["wall_time"] = time.perf_counter() - start
    return RunResult(report, tables, checks)


# ---------------------------------------------------------------------------
# click wiring
# ---------------------------------------------------------------------------


def _parse_params(items) -> dict[str, float]:
    out = {}
    for it in items:
        if "=" not in it:
            raise ConfigError(f"expected key=value, got '{it}'", "params")
        k, v = it.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"'{v}' is not a number", f"params/{k.strip()}") from None
    return out


def _build_config(command: str, config_path, preset, T, N, params, seed, out, options) -> dict:
    cfg: dict[str, Any] = {}
    if config_path:
        try:
            cfg = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON ({e.msg})", "<root>") from None
        if not isinstance(cfg, dict):
            raise ConfigError("experiment document must be an object", "<root>")
    problem = dict(cfg.get("problem", {}))
    if preset:
        problem["coefficients"] = preset
    if "coefficients" not in problem:
        problem["coefficients"] = "example" if command == "example" else "nonlinear"
    if T is not None:
        problem["T"] = T
    if N is not None:
        problem["N"] = N
    if params:
        problem["params"] = {**problem.get("params", {}), **params}
    cfg["problem"] = problem
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output"] = out
    opts = {**cfg.get("options", {}), **{k: v for k, v in options.items() if v is not None}}
    if opts:
        cfg["options"] = opts
    return cfg


def _execute(command: str, cfg: dict, timing: bool) -> None:
    try:
        res = run(command, cfg, timing)
    except ConfigError as e:
        raise click.UsageError(str(e)) from None
    except jsonschema.SchemaError as e:  # pragma: no cover - schema bug
        raise click.UsageError(str(e)) from None
    except NumericDivergence as e:
        tb = e.__traceback__
        while tb.tb_next is not None:
            tb = tb.tb_next
        where = tb.tb_frame.f_globals.get("__name__", "?")
        click.echo(f"error in {where}: {type(e).__name__}: {e}", err=True)
        sys.exit(EXIT_SOLVER)
    except InvalidArgument as e:
        raise click.UsageError(str(e)) from None
    click.echo(dumps(res.report), nl=False)
    if cfg.get("output"):
        res.write(Path(cfg["output"]))
    sys.exit(0 if res.passed else EXIT_FAIL)


def common(f):
    f = click.option("--timing", is_flag=True, help="Add wall time to the report (breaks byte-identity).")(f)
    f = click.option("--out", type=click.Path(file_okay=False), help="Directory for report.json and CSV files.")(f)
    f = click.option("--seed", type=int, help="Seed for Monte Carlo paths.")(f)
    f = click.option("--param", "params", multiple=True, help="Preset parameter key=value (repeatable).")(f)
    f = click.option("--N", "N", type=int, help="Number of time steps.")(f)
    f = click.option("--T", "T", type=float, help="Horizon.")(f)
    f = click.option("--preset", type=click.Choice(sorted(PRESETS)), help="Bundled problem.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="Experiment JSON document (problem, seed, output, options).")(f)
    return f


def _go(command, config_path, preset, T, N, params, seed, out, timing, **options):
    try:
        prm = _parse_params(params)
        cfg = _build_config(command, config_path, preset, T, N, prm, seed, out, options)
    except ConfigError as e:
        raise click.UsageError(str(e)) from None
    _execute(command, cfg, timing)


@click.group()
@click.version_option(_version(), prog_name="fbsde-smp")
def main() -> None:
    """Fully coupled FBSDE solver and stochastic maximum principle checks on a recombining lattice."""


@main.command()
@common
@click.option("--method", type=click.Choice(["local", "picard"]), help="Node-local or global Picard solver.")
@click.option("--tol", type=float, help="Convergence tolerance.")
def solve(**kw):
    """Solve the state FBSDE under the candidate control."""
    _go("solve", **kw)


@main.command()
@common
def adjoint(**kw):
    """First- and second-order adjoint processes along the solved state."""
    _go("adjoint", **kw)


@main.command("check-mp")
@common
@click.option("--mode", type=click.Choice(["auto", "global", "global-linear-z", "local", "lq"]),
              help="Hamiltonian form (auto picks from the problem).")
@click.option("--tolerance", type=float, help="Absolute tolerance on gaps.")
@click.option("--paths", type=int, help="Paths for the LQ adjoint (h, m, n).")
def check_mp(**kw):
    """Check the maximum principle at every node and competitor control."""
    _go("check-mp", **kw)


def _floats(ctx, param, value):
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated numbers") from None


@main.command("spike-orders")
@common
@click.option("--eps-list", "eps_list", callback=_floats, help="Comma-separated eps values (default T/8..T/64).")
@click.option("--paths", type=int, help="Monte Carlo paths (default 100000).")
@click.option("--beta", "beta", type=click.Choice(["2", "4"]), multiple=True, help="Moment exponents.")
def spike_orders(beta, **kw):
    """Fit log-log slopes of spike-perturbation moments against eps."""
    _go("spike-orders", beta=[int(b) for b in beta] or None, **kw)


@main.command()
@common
@click.option("--paths", type=int, help="Paths for (h, m, n).")
@click.option("--pieces", type=int, help="Pieces of the brute-force controls (0 disables).")
@click.option("--tolerance", type=float, help="Absolute tolerance on gaps.")
def lq(**kw):
    """Riccati ODEs, the (h, m, n) system, the explicit inequality and brute force."""
    _go("lq", **kw)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--a", type=float, default=0.5, show_default=True)
@click.option("--b", type=float, default=1.0, show_default=True)
@click.option("--c", type=float, default=0.25, show_default=True)
@click.option("--d", type=float, default=1.0, show_default=True)
@click.option("--T", "T", type=float, help="Horizon.")
@click.option("--N", "N", type=int, help="Number of time steps.")
@click.option("--seed", type=int)
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--timing", is_flag=True)
@click.option("--pieces", type=int, help="Pieces of the brute-force controls (default 3).")
@click.option("--tolerance", type=float)
@click.option("--paths", type=int)
def example(a, b, c, d, **kw):
    """The worked LQ example: global pass, local failure, brute-force argmin."""
    params = tuple(f"{k}={v!r}" for k, v in (("a", a), ("b", b), ("c", c), ("d", d)))
    _go("example", preset="example", params=params, **kw)


@main.command()
@common
@click.option("--L1", "L1", type=float)
@click.option("--L2", "L2", type=float)
@click.option("--L3", "L3", type=float)
def assumptions(**kw):
    """Contraction constants, breakdown time t* and the comparison bound on p."""
    _go("assumptions", **kw)


if __name__ == "__main__":  # pragma: no cover
    main()
