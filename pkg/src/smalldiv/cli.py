"""Command-line front end.

    smalldiv solve --config run.json --out results/
    smalldiv sweep --config sweep.json --workers 4
    smalldiv cluster-report --config clusters.json
    smalldiv certify-inverse --config cert.json
    smalldiv selftest

Exit codes: 0 success/converged, 1 failed check (selftest, cluster-report,
certify-inverse), 2 excluded parameter, 3 stagnation, 64 configuration
error, 74 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("smalldiv")

SCHEMA_VERSION = 1

EXIT_OK, EXIT_FAIL, EXIT_EXCLUDED, EXIT_STAGNATED = 0, 1, 2, 3
EXIT_CONFIG, EXIT_IO = 64, 74


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    problem: str = "cubic-d1"
    potential_table: str | None = None     # overrides V0 of the preset (entries at l = 0)
    forcing_table: str | None = None       # overrides g of the preset
    nu: int | None = None
    d: int | None = None
    profile: str = "desk"
    seed: int = 20240611
    out: str = "smalldiv-out"
    solver: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    clusters: dict = field(default_factory=dict)
    certify: dict = field(default_factory=dict)
    selftest: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


SWEEP_DEFAULTS = {"eps_range": [0.0, 1e-3], "lambda_range": [0.5, 1.5], "grid": [3, 41],
                  "Ns": [4], "tau": 4.0, "solve_nodes": False, "melnikov_gammas": [0.05, 0.1, 0.2]}
CLUSTER_DEFAULTS = {"N": 4, "Nprime": 16, "eps": 0.01, "lam": 0.9, "theta_range": None,
                    "theta_count": 50, "thetas": None, "state": "bump"}
CERTIFY_DEFAULTS = {"instances": 10, "N": 3, "n_clusters": None, "amp": 0.04}
SELFTEST_DEFAULTS = {"manifest": None, "count": 1000, "inject_C": None}


def load_config(path: str | None, profile: str | None = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}")
    known = {f.name for f in fields(ExperimentConfig)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
    cfg = ExperimentConfig(**data)
    if profile is not None:
        cfg.profile = profile
    if cfg.profile not in ("desk", "paper"):
        raise ConfigError(f"profile must be desk or paper, not {cfg.profile!r}")
    env = os.environ.get("SMALLDIV_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"SMALLDIV_SEED={env!r} is not an integer") from None
    for name, defaults in (("sweep", SWEEP_DEFAULTS), ("clusters", CLUSTER_DEFAULTS),
                           ("certify", CERTIFY_DEFAULTS), ("selftest", SELFTEST_DEFAULTS)):
        sec = getattr(cfg, name)
        bad = set(sec) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in {name}: {', '.join(sorted(bad))}")
        setattr(cfg, name, {**defaults, **sec})
    for p in (cfg.potential_table, cfg.forcing_table):
        if p is not None and not Path(p).exists():
            raise ConfigError(f"table {p} does not exist")
    return cfg


def build_problem(cfg: ExperimentConfig):
    from dataclasses import replace
    from .nls_operator import (NonlinearityData, forcing_from_table, potential_from_table,
                               preset)
    try:
        prob = preset(cfg.problem)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    if (cfg.nu is not None and cfg.nu != prob.nu) or (cfg.d is not None and cfg.d != prob.d):
        raise ConfigError(f"preset {cfg.problem} has (nu, d) = ({prob.nu}, {prob.d})")
    if cfg.potential_table is not None:
        coeffs, nu, d = _table(cfg.potential_table)
        if (nu, d) != (prob.nu, prob.d):
            raise ConfigError(f"{cfg.potential_table}: dimensions ({nu}, {d}) do not match")
        pot = potential_from_table(coeffs, nu, d, prob.potential.m, prob.potential.beta0)
        prob = replace(prob, potential=pot, name=prob.name + "+table")
    if cfg.forcing_table is not None:
        coeffs, nu, d = _table(cfg.forcing_table)
        if (nu, d) != (prob.nu, prob.d):
            raise ConfigError(f"{cfg.forcing_table}: dimensions ({nu}, {d}) do not match")
        nl = prob.nonlinearity
        nl = NonlinearityData(nl.f, nl.fprime, forcing_from_table(coeffs, nu, d), nl.name, nl.grid)
        prob = replace(prob, nonlinearity=nl, name=prob.name + "+forcing")
    return prob


def _table(path):
    from .nls_operator import read_table
    try:
        return read_table(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def solver_config(cfg: ExperimentConfig):
    from .nash_moser import SolverConfig
    known = {f.name for f in fields(SolverConfig)}
    bad = set(cfg.solver) - known
    if bad:
        raise ConfigError(f"unknown solver keys: {', '.join(sorted(bad))}")
    opts = dict(cfg.solver)
    if "Ns" in opts and opts["Ns"] is not None:
        opts["Ns"] = tuple(int(n) for n in opts["Ns"])
    try:
        return SolverConfig(**{**opts, "profile": cfg.profile})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# output

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_lines(path: Path, lines):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _pmap(workers: int):
    if workers <= 1:
        return map, None
    ex = ProcessPoolExecutor(max_workers=workers)
    return ex.map, ex


# ---------------------------------------------------------------------------
# commands

_VERDICT_EXIT = {"converged": EXIT_OK, "stagnated": EXIT_STAGNATED}


def verdict_exit(verdict: str) -> int:
    if verdict.startswith("excluded"):
        return EXIT_EXCLUDED
    return _VERDICT_EXIT[verdict]


def cmd_solve(cfg: ExperimentConfig, out: Path, workers: int = 1) -> int:
    from . import nash_moser as nm
    from .nls_operator import write_table
    prob = build_problem(cfg)
    scfg = solver_config(cfg)
    t = time.perf_counter()
    state, verdict = nm.run(scfg, prob)
    rec = nm.run_record(scfg, prob, state, verdict, time.perf_counter() - t)
    rec["schema_version"] = SCHEMA_VERSION
    rec["seed"] = cfg.seed
    # wall-clock time is kept out of the deterministic record
    seconds = rec.pop("seconds")
    write_json(out / "run_record.json", rec)
    write_table(out / "solution.txt", state.u.plus, prob.nu, prob.d)
    print(f"solve: {verdict} at N = {state.u.N} ({seconds:.1f} s)")
    return verdict_exit(verdict)


def cmd_sweep(cfg: ExperimentConfig, out: Path, workers: int = 1) -> int:
    from . import nash_moser as nm
    from .measure import csv_lines, loglog_slope, melnikov_constant, sweep_measure
    prob = build_problem(cfg)
    sw = cfg.sweep
    try:
        box = _sweep_box(sw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sweep: {exc}") from None
    asm = prob.assembly()
    pmap, ex = _pmap(workers)
    rows, summary = [], {"N": [], "bad_fraction": [], "halfwidth": [], "measure_fraction": [],
                         "weak_bad_fraction": [], "complexity_max": []}
    try:
        for N in sw["Ns"]:
            est = sweep_measure(asm, box, int(N), float(sw["tau"]), pmap=pmap)
            rows += _unique_rows(est.rows)
            summary["N"].append(int(N))
            for k in ("bad_fraction", "halfwidth", "measure_fraction", "weak_bad_fraction",
                      "complexity_max"):
                summary[k].append(getattr(est, k))
    finally:
        if ex is not None:
            ex.shutdown()
    if len(summary["N"]) >= 2:
        summary["slope_bad_fraction"] = loglog_slope(summary["N"], summary["bad_fraction"])
        summary["slope_measure_fraction"] = loglog_slope(summary["N"], summary["measure_fraction"])
    mel = melnikov_constant(asm, int(cfg.solver.get("N0", 4)), list(sw["melnikov_gammas"]))
    summary["melnikov_C"] = mel["C"]
    summary["melnikov_spread"] = mel["spread"]
    summary["tau"] = float(sw["tau"])
    summary["seed"] = cfg.seed
    write_lines(out / "sweep.csv", csv_lines(rows))
    if sw["solve_nodes"]:
        eps_grid, lam_grid = box.nodes()
        lines = ["eps,lambda,verdict,final_N,r_full_s0"]
        base = solver_config(cfg)
        for e in sorted(set(eps_grid.tolist())):
            for lam in sorted(set(lam_grid.tolist())):
                scfg = nm.SolverConfig(**{**base.to_dict(), "eps": float(e), "lam": float(lam)})
                st, v = nm.run(scfg, prob)
                res = st.history[-1].get("residual", {}).get("r_full", {})
                r0 = res.get(str(float(scfg.params(prob.nu + prob.d).s0)), math.nan)
                lines.append(f"{float(e)!r},{float(lam)!r},{v},{st.u.N},{float(r0)!r}")
        write_lines(out / "verdicts.csv", lines)
    write_json(out / "sweep_summary.json", summary)
    print(f"sweep: {len(rows)} nodes, bad fractions {summary['bad_fraction']}")
    return EXIT_OK


def _sweep_box(sw):
    """ParameterBox from the sweep section; a resolution of 1 pins that axis to its low end."""
    from .measure import ParameterBox
    eps, lam = list(sw["eps_range"]), list(sw["lambda_range"])
    grid = [int(g) for g in sw["grid"]]
    if len(grid) != 2 or min(grid) < 1:
        raise ValueError("grid must be two resolutions >= 1")
    if grid[0] == 1:
        eps, grid[0] = [eps[0], eps[0]], 2
    if grid[1] == 1:
        lam, grid[1] = [lam[0], lam[0]], 2
    return ParameterBox(tuple(eps), tuple(lam), tuple(grid))


def _unique_rows(rows):
    seen, out = set(), []
    for r in rows:
        key = (r["N"], r["eps"], r["lambda"])
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out


def _cluster_state(prob, kind):
    from .nls_operator import StateSpectrum
    if kind == "zero":
        return None
    R = 4
    plus = np.zeros((2 * R + 1,) * (prob.nu + prob.d), complex)
    c = (R,) * (prob.nu + prob.d)
    for ax in range(prob.nu + prob.d):
        for sgn in (-1, 1):
            idx = list(c)
            idx[ax] += sgn
            plus[tuple(idx)] = 0.05
    return StateSpectrum.from_plus(plus, prob.nu, prob.d)


def _cluster_row(asm, par, cl, K0, theta):
    from .separation import build_bad_clusters
    part = build_bad_clusters(asm, par, cl["eps"], cl["lam"], theta, cl["N"], cl["Nprime"], K0=K0)
    sep = part.min_sep if len(part) > 1 else math.inf
    return {"theta": float(theta), "clusters": len(part), "diam_max": part.diam_max,
            "min_sep": sep, "chain_max": part.chain_max, "passed": bool(part.passed)}


def cmd_cluster_report(cfg: ExperimentConfig, out: Path, workers: int = 1) -> int:
    import functools
    from .multiscale import ScaleParams
    from .smatrix import default_K0
    prob = build_problem(cfg)
    cl = cfg.clusters
    par = ScaleParams.paper(prob.nu + prob.d) if cfg.profile == "paper" else \
        ScaleParams.desk(prob.nu + prob.d)
    K0 = default_K0(prob.nu + prob.d, par.s0)
    asm = prob.assembly(_cluster_state(prob, cl["state"]))
    if cl["thetas"] is not None:
        thetas = [float(t) for t in cl["thetas"]]
    else:
        lo, hi = cl["theta_range"] or (-2.0 * cl["N"] ** 2, 2.0 * cl["N"] ** 2)
        thetas = np.linspace(lo, hi, int(cl["theta_count"])).tolist()
    pmap, ex = _pmap(workers)
    try:
        rows = list(pmap(functools.partial(_cluster_row, asm, par, cl, K0), thetas))
    finally:
        if ex is not None:
            ex.shutdown()
    ok = all(r["passed"] for r in rows)
    lines = ["theta,clusters,diam_max,min_sep,chain_max,passed"]
    lines += [f"{r['theta']!r},{r['clusters']},{r['diam_max']},{r['min_sep']},{r['chain_max']},"
              f"{int(r['passed'])}" for r in rows]
    write_lines(out / "clusters.csv", lines)
    write_json(out / "cluster_summary.json", {
        "N": cl["N"], "Nprime": cl["Nprime"], "C1": par.C1, "thetas": len(rows),
        "nonempty": sum(1 for r in rows if r["clusters"]), "passed": ok,
        "max_diam": max((r["diam_max"] for r in rows), default=0), "seed": cfg.seed})
    print(f"cluster-report: {len(rows)} theta values, all passed = {ok}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_certify_inverse(cfg: ExperimentConfig, out: Path, workers: int = 1) -> int:
    from .multiscale import ScaleParams, multiscale_invert, planted_instance
    from .smatrix import default_K0
    c = cfg.certify
    par = ScaleParams.desk(2) if cfg.profile == "desk" else ScaleParams.paper(2)
    K0 = default_K0(2, par.s0)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for i in range(int(c["instances"])):
        A, info = planted_instance(rng, int(c["N"]), par, n_clusters=c["n_clusters"],
                                   amp=float(c["amp"]))
        _, cert = multiscale_invert(A, par, N=int(c["N"]), K0=K0, strict=False)
        rows.append({"instance": i, "sites": len(A.rows), "bad": cert.extras["bad"],
                     "frobenius_rel_error": cert.extras["frobenius_rel_error"],
                     "certificate": bool(cert.passed),
                     "violations": sorted(cert.extras["violations"])})
    exact = all(r["frobenius_rel_error"] <= 1e-7 for r in rows)
    passes = sum(r["certificate"] for r in rows)
    write_json(out / "certify_inverse.json", {"seed": cfg.seed, "rows": rows, "exact": exact,
                                              "certificate_passes": passes})
    print(f"certify-inverse: {passes}/{len(rows)} certificates pass, exact = {exact}")
    return EXIT_OK if exact and passes >= 0.9 * len(rows) else EXIT_FAIL


def cmd_selftest(cfg: ExperimentConfig, out: Path, workers: int = 1) -> int:
    from .constants import ManifestError, load_or_build, property_suite
    st = cfg.selftest
    path = Path(st["manifest"]) if st["manifest"] else out / "constants.json"
    consts, rebuilt = load_or_build(path)
    if rebuilt:
        print(f"selftest: constants manifest written to {path}")
    checks, fails = property_suite(consts, consts.seed + 1, int(st["count"]),
                                   override_C=st["inject_C"])
    for f in fails[:10]:
        print(f"FAIL {f}")
    write_json(out / "selftest.json", {"checks": checks, "failures": [asdict(f) for f in fails],
                                       "manifest": str(path), "rebuilt": rebuilt})
    print(f"selftest: {checks} checks, {len(fails)} failures")
    return EXIT_OK if not fails else EXIT_FAIL


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "cluster-report": cmd_cluster_report,
            "certify-inverse": cmd_certify_inverse, "selftest": cmd_selftest}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smalldiv")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output directory (default: config value)")
    p.add_argument("--profile", choices=("desk", "paper"))
    p.add_argument("--inject-C", type=float, help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.profile)
        if args.inject_C is not None:
            cfg.selftest["inject_C"] = args.inject_C
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        out = Path(args.out or cfg.out)
        return COMMANDS[args.command](cfg, out, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
