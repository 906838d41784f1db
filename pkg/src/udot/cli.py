"""Command-line front end: ``udot {solve|diagnose|verify|oracle}``.

A run is described by a JSON config whose fields may be overridden by flags.
Outputs go to ``--out``: ``solution.csv``, ``levelsets.csv``, ``report.json``
and, for ``oracle``, ``oracle_problem.json``/``oracle_solution.json``.

Exit codes: 0 ok, 2 configuration error, 3 solver failure, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from udot.errors import ConfigError, UdotError, ZeroMargin
from udot.geometry import restrict_sublevel, trace_level_set, write_mesh_csv
from udot.oracle import discretize, duality_gap, solve_lp
from udot.solver import (BC_MODES, PotentialSolution, _Interpolants, conjugate_batch,
                         ellipticity_profile, jacobian_check, make_problem, reconstruct_map,
                         sample_source, solve_ode, swept_volume_diagnostic,
                         uniform_ellipticity_margin, verify_nonlocal, verify_pushforward)
from udot.surplus import check_enhanced_twist, check_nondegeneracy, check_twist

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
PRESETS = ("annulus", "strip", "tilted")


@dataclass
class RunConfig:
    preset: str = "strip"
    cells: int = 256
    ode_steps: int = 256
    oracle_nx: int = 30
    oracle_ny: int = 64
    samples: int = 100_000
    bins: int = 50
    bc: str | None = None
    k0: float | None = None
    convexify_coefficient: float = 0.0
    seed: int = 0
    out: str = "udot-out"
    levelset_count: int = 8
    thresholds: dict = field(default_factory=lambda: {
        "tv": 0.02, "gap": 0.01, "nonlocal": 1e-2, "jacobian": 1e-2, "mass": 5e-3})

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}", {"preset": self.preset})
        for name in ("cells", "ode_steps", "oracle_nx", "oracle_ny", "samples", "bins", "levelset_count"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive", {name: getattr(self, name)})
        periodic = self.preset == "annulus"
        if self.bc is not None:
            if self.bc not in BC_MODES:
                raise ConfigError(f"bc must be one of {BC_MODES}", {"bc": self.bc})
            if (self.bc == "periodic-shooting") != periodic:
                raise ConfigError("bc mode inconsistent with the target's periodicity", {"bc": self.bc})
            if self.bc == "initial" and self.k0 is None:
                raise ConfigError("bc 'initial' needs k0", {"bc": self.bc})
        if periodic and self.convexify_coefficient != 0.0:
            raise ConfigError("cannot convexify a periodic surplus", {"preset": self.preset})


_FLAG_FIELDS = {
    "preset": str, "cells": int, "ode_steps": int, "oracle_nx": int, "oracle_ny": int,
    "samples": int, "bins": int, "bc": str, "k0": float, "convexify_coefficient": float,
    "seed": int, "out": str,
}


def load_config(args) -> RunConfig:
    data: dict = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", {"config": str(path)})
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}", {"config": str(path)}) from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object", {"config": str(path)})
    elif args.preset is None:
        raise ConfigError("need --config or --preset")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for name in _FLAG_FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            data[name] = val
    if "thresholds" in data:
        data["thresholds"] = {**RunConfig().thresholds, **data["thresholds"]}
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(path: Path, report: dict) -> None:
    path.write_text(json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n")


def _read_report(path: Path) -> dict:
    if path.is_file():
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError:
            return {}
    return {}


def _problem(cfg: RunConfig):
    return make_problem(cfg.preset, cfg.cells, cfg.ode_steps, cfg.convexify_coefficient)


def _sampled_indices(n: int, count: int) -> list[int]:
    return sorted(set(np.linspace(0, n - 1, min(count, n)).round().astype(int).tolist()))


def _levelsets(problem, sol, count) -> tuple[list, list]:
    meshes, warnings = [], []
    for i in _sampled_indices(sol.y_grid.size, count):
        y, k, q = float(sol.y_grid[i]), float(sol.k[i]), float(sol.q_used[i])
        m1 = trace_level_set(problem.model, problem.region, y, k, problem.cells)
        m2 = restrict_sublevel(m1, problem.model, y, q)
        meshes.append(({"y": y, "set": 1}, m1))
        meshes.append(({"y": y, "set": 2}, m2))
        warnings.extend(m1.warnings)
    return meshes, warnings


# ---------------------------------------------------------------------------
# commands


def cmd_solve(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = _problem(cfg)
    report: dict = {"command": "solve", "config": dataclasses.asdict(cfg), "warnings": []}
    try:
        sol = solve_ode(problem, cfg.bc, cfg.k0)
    except UdotError as exc:
        partial = getattr(exc, "partial", None)
        if isinstance(partial, PotentialSolution):
            partial.to_csv(out / "solution.csv")
        report["error"] = {"type": type(exc).__name__, "message": str(exc), "location": exc.location}
        write_report(out / "report.json", report)
        logger.error("solver failed: %s", exc)
        return EXIT_SOLVER
    sol.to_csv(out / "solution.csv")
    meshes, warnings = _levelsets(problem, sol, cfg.levelset_count)
    write_mesh_csv(out / "levelsets.csv", meshes)
    profile = ellipticity_profile(problem, sol)
    report["warnings"] = [{"kind": "tangency", **w} for w in warnings]
    report["diagnostics"] = sol.diagnostics
    report["uniform_ellipticity_margin"] = uniform_ellipticity_margin(problem, sol)
    report["ellipticity"] = [{"y": r["y"], "lambda": r["lambda"], "theta": r["theta"]} for r in profile]
    report["components"] = [{"y": r["y"], "X1": r["X1_components"], "X2": r["X2_components"]}
                            for r in profile]
    report["swept_volume"] = swept_volume_diagnostic(problem, sol)
    write_report(out / "report.json", report)
    return EXIT_OK


def _margin(fn, problem, name, seed, warnings):
    try:
        return fn(problem.model, problem.region, problem.y_interval, seed=seed).to_dict()
    except ZeroMargin as exc:
        warnings.append({"kind": name, "message": str(exc), "location": exc.location})
        return {"min_value": exc.report.min_value if exc.report else 0.0, "zero_margin": True}


def cmd_diagnose(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = _problem(cfg)
    warnings: list = []
    report: dict = {}
    report["margins"] = {
        "nondegeneracy": _margin(check_nondegeneracy, problem, "nondegeneracy", cfg.seed, warnings),
        "twist": _margin(check_twist, problem, "twist", cfg.seed, warnings),
        "enhanced_twist": _margin(check_enhanced_twist, problem, "enhanced_twist", cfg.seed, warnings),
    }
    sol_path = out / "solution.csv"
    lattice = []
    if sol_path.is_file():
        sol = PotentialSolution.from_csv(sol_path)
        pts = [(float(sol.y_grid[i]), float(sol.k[i]), float(sol.q_used[i]))
               for i in _sampled_indices(sol.y_grid.size, cfg.levelset_count)]
        report["lattice_source"] = "solution"
    else:
        y0, y1 = problem.y_interval
        ys = np.linspace(y0, y1, 5, endpoint=not problem.periodic)
        pts = []
        xs = sample_source(problem, 2000, cfg.seed)
        for y in ys:
            sy = problem.model.d_y(xs, y)
            lo, hi = float(sy.min()), float(sy.max())
            for p in np.linspace(lo, hi, 5)[1:-1]:
                for q in (-0.5, 0.0, 0.5, 1.0):
                    pts.append((float(y), float(p), q))
        report["lattice_source"] = "grid"
    for y, p, q in pts:
        try:
            m1 = trace_level_set(problem.model, problem.region, y, p, problem.cells)
        except UdotError as exc:
            warnings.append({"kind": type(exc).__name__, "message": str(exc), "location": exc.location})
            continue
        m2 = restrict_sublevel(m1, problem.model, y, q)
        warnings.extend({"kind": "tangency", **w} for w in m1.warnings)
        lattice.append({"y": y, "p": p, "q": q, "X1": 0 if m1.is_empty else m1.n_components,
                        "X2": 0 if m2.is_empty else m2.n_components})
    report["components"] = lattice
    report["warnings"] = warnings
    for w in warnings:
        logger.warning("%s", w)
    full = _read_report(out / "report.json")
    full["diagnose"] = report
    full.setdefault("config", dataclasses.asdict(cfg))
    write_report(out / "report.json", full)
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    sol_path = out / "solution.csv"
    if not sol_path.is_file():
        raise ConfigError(f"no solution file at {sol_path}", {"path": str(sol_path)})
    try:
        sol = PotentialSolution.from_csv(sol_path)
    except ValueError as exc:
        raise ConfigError(str(exc), {"path": str(sol_path)}) from exc
    problem = _problem(cfg)
    if sol.y_grid.size != problem.y_grid.size:
        problem = make_problem(cfg.preset, cfg.cells, sol.y_grid.size - 1, cfg.convexify_coefficient)
    th = cfg.thresholds
    F = reconstruct_map(problem, sol)
    tv, _ = verify_pushforward(problem, F, cfg.samples, cfg.bins, cfg.seed)

    idx = _sampled_indices(sol.y_grid.size, cfg.levelset_count)
    interior = [i for i in idx if 0 < i < sol.y_grid.size - 1] or idx
    nonlocal_max = max(verify_nonlocal(problem, sol, float(sol.y_grid[i])) for i in interior)

    xs = sample_source(problem, 400, cfg.seed + 1)
    try:
        jac = jacobian_check(problem, sol, xs)
        jac_err, jac_excluded = jac.max_rel_error, jac.n_excluded
    except UdotError as exc:
        jac_err, jac_excluded = math.inf, 0
        logger.warning("jacobian check failed: %s", exc)

    dp = discretize(problem, cfg.oracle_nx, cfg.oracle_ny)
    interp = _Interpolants(problem, sol)
    v_atoms = interp.v_at(dp.y_points)
    u_atoms = conjugate_batch(problem, sol, dp.x_points, interp).u
    lp = solve_lp(dp)
    gap = duality_gap(dp, u_atoms, v_atoms, lp)

    block = {
        "pushforward_tv": tv,
        "nonlocal_residual_max": nonlocal_max,
        "jacobian_max_rel_error": jac_err,
        "jacobian_excluded": jac_excluded,
        "duality_gap": gap,
        "oracle_value": lp.value,
    }
    failures = []
    for key, lim in (("pushforward_tv", th["tv"]), ("duality_gap", th["gap"]),
                     ("nonlocal_residual_max", th["nonlocal"]), ("jacobian_max_rel_error", th["jacobian"])):
        if not block[key] <= lim:
            failures.append({"check": key, "value": block[key], "threshold": lim})
    if gap < -1e-9:
        failures.append({"check": "duality_gap_sign", "value": gap, "threshold": -1e-9})
    block["failures"] = failures
    block["passed"] = not failures
    report = _read_report(out / "report.json")
    report["verification"] = block
    write_report(out / "report.json", report)
    return EXIT_OK if not failures else EXIT_VERIFY


def cmd_oracle(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = _problem(cfg)
    dp = discretize(problem, cfg.oracle_nx, cfg.oracle_ny)
    lp = solve_lp(dp)
    (out / "oracle_problem.json").write_text(dp.to_json() + "\n")
    (out / "oracle_solution.json").write_text(lp.to_json() + "\n")
    block = {"atoms": [int(dp.a.size), int(dp.b.size)], "value": lp.value,
             "dual_value": lp.dual_value(dp), "pivots": lp.pivots}
    if cfg.preset == "annulus":
        u = np.hypot(dp.x_points[:, 0], dp.x_points[:, 1])
        block["gap_exact_potentials"] = duality_gap(dp, u, np.zeros(dp.b.size), lp)
    report = _read_report(out / "report.json")
    report["oracle"] = block
    write_report(out / "report.json", report)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "diagnose": cmd_diagnose, "verify": cmd_verify, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="udot", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", default=None, help="JSON run configuration")
    ap.add_argument("--preset", choices=PRESETS)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--cells", type=int)
    ap.add_argument("--ode-steps", dest="ode_steps", type=int)
    ap.add_argument("--oracle-nx", dest="oracle_nx", type=int)
    ap.add_argument("--oracle-ny", dest="oracle_ny", type=int)
    ap.add_argument("--samples", type=int)
    ap.add_argument("--bins", type=int)
    ap.add_argument("--bc", choices=BC_MODES)
    ap.add_argument("--k0", type=float)
    ap.add_argument("--convexify-coefficient", dest="convexify_coefficient", type=float)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc} {exc.location or ''}", file=sys.stderr)
        return EXIT_CONFIG
    except UdotError as exc:
        print(f"error: {type(exc).__name__}: {exc} {exc.location or ''}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
