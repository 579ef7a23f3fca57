"""Command-line front end.

Subcommands ``solve``, ``verify``, ``limit``, ``simulate`` and ``study``
read a YAML configuration (schema ``cmmv-cfg-v1``) and write CSV/JSON
results into an output directory. Exit codes: 0 success, 1 invalid
input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
from typing import Optional

import numpy as np
import yaml

from .equilibrium import (ConvergenceError, EquilibriumSolution, SolverConfig, attach_prior,
                          solve_fixed_point, verify_conditions)
from .game_pricing import (PricingError, epsilon_nash_bruteforce, martingale_check,
                           price_tree_from_psi, unique_equivalent_measure)
from .limit import (CmmvSurface, GridConfig, LimitFileError, OdeConfig, OdeSolution, ShootingError,
                    continuous_fixed_point, nu_from_psi, solve_ode_D)
from .measures import DensityMeasure, MeasureError, UniformMeasure, wasserstein2
from .montecarlo import (SimulationError, fdd_distance, sample_equivalent, sample_historical,
                         sample_limit, skorokhod_embed)
from .risk import RiskError, risk_from_dict

SCHEMA = "cmmv-cfg-v1"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

DEFAULTS = {
    "schema": SCHEMA,
    "mu": {"kind": "uniform", "lower": 0.0, "upper": 1.0, "path": None},
    "H": {"family": "softplus", "slope_low": 0.5, "slope_high": 1.5, "width": 1.0},
    "n": [8],
    "solver": {"damping": 0.5, "tol": 1e-10, "tol_w2": 1e-8, "max_iter": 5000},
    "verify": {"tol": 1e-8, "grid_size": 1000, "epsilon_nash": False, "nash_grid": 2000},
    "ode": {"half_width": 6.0, "rtol": 1e-12, "atol": 1e-14, "tol": 1e-10, "max_iter": 60,
            "c_init": None, "tail_tol": 1e-6},
    "grid": {"points": 48001},
    "limit": {"tol": 1e-4, "dir": None, "surface_x": [-3.0, 3.0, 61], "surface_t": [0.0, 1.0, 11]},
    "simulation": {"law": "equivalent", "num_paths": 10000, "seed": 0, "times": None,
                   "brownian_dt": None},
    "study": {"num_paths": 100000, "times": [0.5, 1.0]},
    "output": {"dir": "cmmv-out"},
}

H_FAMILIES = {
    "softplus": {"family": "softplus", "slope_low": 0.5, "slope_high": 1.5, "width": 1.0},
    "linear": {"family": "linear", "slope": 1.0},
}

LAWS = ("equivalent", "historical", "limit", "limit-historical", "embedding")


class ConfigError(ValueError):
    """Invalid configuration."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"section {path + key!r} must be a mapping")
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def _num(x, name: str, positive: bool = True) -> float:
    try:
        v = float(x)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a number") from exc
    if not math.isfinite(v) or (positive and v <= 0.0):
        raise ConfigError(f"{name} must be a positive finite number")
    return v


def canonicalize(cfg: dict) -> dict:
    """Validate a merged configuration and bring it to canonical form."""
    if cfg.get("schema") != SCHEMA:
        raise ConfigError(f"schema must be {SCHEMA!r}")
    out = copy.deepcopy(cfg)
    n = out["n"]
    n = [n] if isinstance(n, (int, float)) else list(n)
    if not n or any(int(k) != k or int(k) < 1 for k in n):
        raise ConfigError("n must be a positive integer or a list of them")
    out["n"] = [int(k) for k in n]
    mu = out["mu"]
    if mu["kind"] not in ("uniform", "density-table"):
        raise ConfigError("mu.kind must be 'uniform' or 'density-table'")
    if mu["kind"] == "uniform":
        mu["lower"], mu["upper"] = float(mu["lower"]), float(mu["upper"])
        if not mu["lower"] < mu["upper"]:
            raise ConfigError("mu.lower must be below mu.upper")
    elif not mu["path"]:
        raise ConfigError("mu.path is required for a density table")
    h = out["H"]
    if h.get("family") == "softplus":
        lo, hi = _num(h["slope_low"], "H.slope_low"), _num(h["slope_high"], "H.slope_high")
        if not lo < hi:
            raise ConfigError(f"H bounds must satisfy 0 < eps < K, got eps={lo}, K={hi}")
        out["H"] = {"family": "softplus", "slope_low": lo, "slope_high": hi,
                    "width": _num(h.get("width", 1.0), "H.width")}
    elif h.get("family") == "linear":
        out["H"] = {"family": "linear", "slope": _num(h.get("slope", 1.0), "H.slope")}
    else:
        raise ConfigError("H.family must be 'softplus' or 'linear'")
    s = out["solver"]
    if not 0.0 < float(s["damping"]) <= 1.0:
        raise ConfigError("solver.damping must lie in (0, 1]")
    s["damping"] = float(s["damping"])
    s["tol"] = _num(s["tol"], "solver.tol")
    s["tol_w2"] = _num(s["tol_w2"], "solver.tol_w2")
    s["max_iter"] = int(s["max_iter"])
    out["verify"]["tol"] = _num(out["verify"]["tol"], "verify.tol")
    out["limit"]["tol"] = _num(out["limit"]["tol"], "limit.tol")
    sim = out["simulation"]
    if sim["law"] not in LAWS:
        raise ConfigError(f"simulation.law must be one of {', '.join(LAWS)}")
    if int(sim["num_paths"]) < 1:
        raise ConfigError("simulation.num_paths must be positive")
    sim["num_paths"], sim["seed"] = int(sim["num_paths"]), int(sim["seed"])
    if sim["times"] is not None:
        sim["times"] = [float(t) for t in sim["times"]]
    out["grid"]["points"] = int(out["grid"]["points"])
    out["study"]["times"] = [float(t) for t in out["study"]["times"]]
    return out


def parse_config(text: Optional[str]) -> dict:
    """Parse YAML text (or ``None`` for defaults) into the canonical form."""
    user = {}
    if text:
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed configuration: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("configuration must be a mapping")
    base = copy.deepcopy(DEFAULTS)
    h = user.get("H")
    if isinstance(h, dict):
        family = h.get("family", "softplus")
        if family not in H_FAMILIES:
            raise ConfigError("H.family must be 'softplus' or 'linear'")
        base["H"] = copy.deepcopy(H_FAMILIES[family])
    return canonicalize(_merge(base, user))


def emit_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def build_mu(cfg: dict):
    mu = cfg["mu"]
    if mu["kind"] == "uniform":
        return UniformMeasure(mu["lower"], mu["upper"])
    path = mu["path"]
    if not os.path.isfile(path):
        raise ConfigError(f"density table {path!r} not found")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DensityMeasure.from_table(data[:, 0], data[:, 1])


def build_h(cfg: dict):
    return risk_from_dict(cfg["H"])


def solver_config(cfg: dict) -> SolverConfig:
    s = cfg["solver"]
    return SolverConfig(damping=s["damping"], tol=s["tol"], tol_w2=s["tol_w2"], max_iter=s["max_iter"])


def ode_config(cfg: dict) -> OdeConfig:
    o = cfg["ode"]
    return OdeConfig(half_width=float(o["half_width"]), rtol=float(o["rtol"]), atol=float(o["atol"]),
                     tol=float(o["tol"]), max_iter=int(o["max_iter"]),
                     c_init=None if o["c_init"] is None else float(o["c_init"]),
                     tail_tol=float(o["tail_tol"]))


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _write(out_dir: str, name: str, data) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(data)
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _verify_solution(sol, mu, H, cfg: dict, tol: float, check_martingale: bool) -> dict:
    report = verify_conditions(sol, mu, H, grid_size=cfg["verify"]["grid_size"])
    out = {"n": sol.n, "conditions": report.to_json(), "max_slack": report.max_slack,
           "residual_w2": sol.residual_w2, "residual_weights": sol.residual_weights}
    ok = report.passed(tol)
    if check_martingale:
        tree = price_tree_from_psi(sol.psi, sol.n)
        resid = martingale_check(tree)
        out["martingale_residual"] = resid
        try:
            q_plus = unique_equivalent_measure(tree)
            out["max_q_plus_deviation"] = float(max((np.max(np.abs(q - 0.5)) for q in q_plus), default=0.0))
        except PricingError as exc:
            out["equivalent_measure_error"] = str(exc)
            ok = False
        ok = ok and resid < tol
    if cfg["verify"]["epsilon_nash"] and sol.n <= 4:
        e1, e2 = epsilon_nash_bruteforce(sol, H, grid_size=cfg["verify"]["nash_grid"])
        out["epsilon_nash"] = [e1, e2]
        ok = ok and max(e1, e2) < tol
    out["passed"] = bool(ok)
    return out


def cmd_solve(cfg: dict, out_dir: str, tol: float, check_martingale: bool) -> int:
    mu, H = build_mu(cfg), build_h(cfg)
    scfg = solver_config(cfg)
    status = EXIT_OK
    for n in cfg["n"]:
        sol = solve_fixed_point(mu, n, H, scfg)
        _write(out_dir, f"solution_n{n}.json", _json(sol.to_json()))
        _write(out_dir, f"prices_n{n}.csv", price_tree_from_psi(sol.psi, n).to_csv())
        rep = _verify_solution(sol, mu, H, cfg, tol, check_martingale)
        _write(out_dir, f"report_n{n}.json", _json(rep))
        _say(f"n={n} iterations={sol.iterations} residual_w2={sol.residual_w2:.3e} "
             f"max_slack={rep['max_slack']:.3e} {'PASS' if rep['passed'] else 'FAIL'}")
        if not rep["passed"]:
            status = EXIT_NUMERIC
    return status


def cmd_verify(cfg: dict, out_dir: str, tol: float, solution_paths: list[str]) -> int:
    mu, H = build_mu(cfg), build_h(cfg)
    paths = solution_paths or [os.path.join(out_dir, f"solution_n{n}.json") for n in cfg["n"]]
    status = EXIT_OK
    for path in paths:
        if not os.path.isfile(path):
            raise ConfigError(f"solution file {path!r} not found")
        with open(path) as fh:
            try:
                sol = attach_prior(EquilibriumSolution.from_json(json.load(fh)), mu)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"solution file {path!r} is malformed: {exc}") from exc
        rep = _verify_solution(sol, mu, H, cfg, tol, check_martingale=True)
        name = os.path.splitext(os.path.basename(path))[0]
        _write(out_dir, f"verify_{name}.json", _json(rep))
        _say(f"{name}: max_slack={rep['max_slack']:.3e} martingale={rep['martingale_residual']:.3e} "
             f"{'PASS' if rep['passed'] else 'FAIL'}")
        if not rep["passed"]:
            status = EXIT_NUMERIC
    return status


def _limit_objects(cfg: dict, mu, H):
    ode = solve_ode_D(mu, H, ode_config(cfg))
    return ode, CmmvSurface(ode)


def cmd_limit(cfg: dict, out_dir: str, tol: float) -> int:
    mu, H = build_mu(cfg), build_h(cfg)
    ode, surf = _limit_objects(cfg, mu, H)
    grid = continuous_fixed_point(mu, H, GridConfig(half_width=ode.half_width, points=cfg["grid"]["points"]),
                                  solver_config(cfg))
    nu = nu_from_psi(mu, ode)
    w2 = wasserstein2(grid.nu, nu)
    xs = np.linspace(*cfg["limit"]["surface_x"][:2], int(cfg["limit"]["surface_x"][2]))
    ts = np.linspace(*cfg["limit"]["surface_t"][:2], int(cfg["limit"]["surface_t"][2]))
    _write(out_dir, "ode.csv", ode.to_csv())
    _write(out_dir, "ode_diagnostics.json", ode.diagnostics_json() + "\n")
    _write(out_dir, "surface.csv", surf.to_csv(xs, ts))
    report = {"c": ode.c, "alpha_grid": grid.alpha, "c_minus_inverse_alpha": ode.c - 1.0 / grid.alpha,
              "w2_cross_check": w2, "grid_points": cfg["grid"]["points"], "passed": bool(w2 < tol)}
    _write(out_dir, "limit_report.json", _json(report))
    _say(f"c={ode.c:.12g} 1/alpha_grid={1.0 / grid.alpha:.12g} W2(ode, grid)={w2:.3e} "
         f"{'PASS' if report['passed'] else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def _load_limit(directory: str) -> OdeSolution:
    try:
        with open(os.path.join(directory, "ode_diagnostics.json")) as fh:
            c = float(json.load(fh)["c"])
        with open(os.path.join(directory, "ode.csv")) as fh:
            return OdeSolution.from_csv(fh.read(), c)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, LimitFileError):
            raise
        raise LimitFileError(f"cannot read limit solution from {directory!r}: {exc}") from exc


def cmd_simulate(cfg: dict, out_dir: str) -> int:
    sim = cfg["simulation"]
    mu, H = build_mu(cfg), build_h(cfg)
    law, seed, num = sim["law"], sim["seed"], sim["num_paths"]
    n = cfg["n"][0]
    if law == "embedding":
        rec = skorokhod_embed(n, num, sim["brownian_dt"], seed)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path_id", "q", "tau", "walk"])
        for i in range(num):
            for q in range(n):
                w.writerow([i, q + 1, repr(float(rec.tau[i, q])), repr(float(rec.embedded_walk[i, q]))])
        _write(out_dir, "embedding.csv", buf.getvalue())
        _say(f"embedding n={n} paths={num} mean tau_n={rec.tau[:, -1].mean():.6f}")
        return EXIT_OK
    if law in ("limit", "limit-historical"):
        ode, surf = _limit_objects(cfg, mu, H)
        times = sim["times"] or list(np.linspace(0.0, 1.0, 11))
        ens = sample_limit(surf, ode, H, num, times, seed)[0 if law == "limit" else 1]
    else:
        sol = solve_fixed_point(mu, n, H, solver_config(cfg))
        tree = price_tree_from_psi(sol.psi, n)
        times = sim["times"]
        ens = (sample_equivalent(tree, num, seed, times) if law == "equivalent"
               else sample_historical(sol, tree, num, seed, times))
    _write(out_dir, f"paths_{law}.csv", ens.to_csv())
    _write(out_dir, f"paths_{law}.bin", ens.to_bytes())
    _say(f"{law}: paths={ens.num_paths} times={ens.times.size} mean terminal={ens.paths[:, -1].mean():.6f}")
    return EXIT_OK


def cmd_study(cfg: dict, out_dir: str) -> int:
    mu, H = build_mu(cfg), build_h(cfg)
    if cfg["limit"]["dir"]:
        ode = _load_limit(cfg["limit"]["dir"])
    else:
        ode = solve_ode_D(mu, H, ode_config(cfg))
    surf = CmmvSurface(ode)
    nu = nu_from_psi(mu, ode)
    times = cfg["study"]["times"]
    num, seed = cfg["study"]["num_paths"], cfg["simulation"]["seed"]
    limit_ens = sample_limit(surf, ode, H, num, times, seed)[0]
    rows = []
    for n in cfg["n"]:
        sol = solve_fixed_point(mu, n, H, solver_config(cfg))
        tree = price_tree_from_psi(sol.psi, n)
        ens = sample_equivalent(tree, num, seed + n, times)
        fdd = fdd_distance(ens, limit_ens, times)
        rows.append([n, wasserstein2(sol.nu, nu), *fdd.per_time, fdd.joint_lower, martingale_check(tree)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "w2_nu"] + [f"fdd_t{t!r}" for t in times] + ["fdd_joint_lower", "martingale_residual"])
    for r in rows:
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    _write(out_dir, "study.csv", buf.getvalue())
    col = [r[1] for r in rows]
    ok = all(b < a for a, b in zip(col, col[1:]))
    for r in rows:
        _say(f"n={r[0]} W2(nu_n, nu)={r[1]:.6e} fdd={' '.join(f'{v:.4e}' for v in r[2:2 + len(times)])}")
    _say("W2 column strictly decreasing: " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmmv", description="Equilibrium prices of the informed-trading game.")
    p.add_argument("--print-defaults", action="store_true", help="print the default configuration and exit")
    sub = p.add_subparsers(dest="command")
    for name, help_ in (("solve", "solve the n-stage equilibrium and verify it"),
                        ("verify", "re-verify stored solutions"),
                        ("limit", "solve the continuous-time limit and cross-check it"),
                        ("simulate", "sample price paths"),
                        ("study", "discrete-to-continuous convergence table")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="YAML configuration file")
        s.add_argument("--seed", type=int, help="override simulation.seed")
        s.add_argument("--out", help="output directory (overrides output.dir)")
        s.add_argument("--tol", type=float, help="override the pass tolerance of the subcommand")
        if name == "solve":
            s.add_argument("--check-martingale", action="store_true", help="also check the price martingale")
        if name == "verify":
            s.add_argument("solutions", nargs="*", help="solution JSON files (default: from output dir)")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.print_defaults:
        sys.stdout.write(emit_config(canonicalize(copy.deepcopy(DEFAULTS))))
        return EXIT_OK
    if not args.command:
        build_parser().print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        text = None
        if args.config:
            if not os.path.isfile(args.config):
                raise ConfigError(f"configuration file {args.config!r} not found")
            with open(args.config) as fh:
                text = fh.read()
        cfg = parse_config(text)
        if args.seed is not None:
            cfg["simulation"]["seed"] = int(args.seed)
        if args.tol is not None and not args.tol > 0.0:
            raise ConfigError("--tol must be positive")
        out_dir = args.out or cfg["output"]["dir"]
        cmd = args.command
        if cmd == "solve":
            return cmd_solve(cfg, out_dir, args.tol or cfg["verify"]["tol"], args.check_martingale)
        if cmd == "verify":
            return cmd_verify(cfg, out_dir, args.tol or cfg["verify"]["tol"], args.solutions)
        if cmd == "limit":
            return cmd_limit(cfg, out_dir, args.tol or cfg["limit"]["tol"])
        if cmd == "simulate":
            return cmd_simulate(cfg, out_dir)
        return cmd_study(cfg, out_dir)
    except (ConvergenceError, ShootingError) as exc:
        trace = getattr(exc, "residuals", None) or getattr(exc, "trace", None) or []
        print(f"numerical failure: {exc}", file=sys.stderr)
        print("residual trace: " + " ".join(f"{float(r):.3e}" for r in trace[-20:]), file=sys.stderr)
        return EXIT_NUMERIC
    except (LimitFileError, PricingError, SimulationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, RiskError, MeasureError, ValueError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
