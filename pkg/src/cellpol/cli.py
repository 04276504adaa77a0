"""Command-line front end.

Usage::

    cellpol COMMAND [--config PATH] [--out DIR] [--workers N] [key=value ...]

Commands: ``simulate``, ``steady``, ``obstacle``, ``critical-mass``,
``sweep``, ``validate``.  Exit status: 0 success, 2 non-convergence or a
failed check, 3 invalid configuration, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod
from .dynamics import DtPolicy, homogeneous_initial_state, run_to_time
from .errors import ConfigError, ConsistencyError, ConvergenceError, DomainError, FieldFormatError
from .fileio import read_pbf1, read_psf1, write_pbf1, write_psf1
from .kernels import BACKEND

EXIT_OK = 0
EXIT_CONVERGENCE = 2
EXIT_CONFIG = 3
EXIT_IO = 4


# -- output helpers ------------------------------------------------------------


def jsonable(x):
    """Convert numpy scalars/arrays, tuples and infinities for JSON output."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isinf(x):
            return "infinite" if x > 0 else "-infinite"
        if math.isnan(x):
            return "nan"
        return x
    return x


def dump_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(jsonable(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")


class Run:
    """Output directory bookkeeping shared by the commands."""

    def __init__(self, command: str, cfg, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.hash = cfg.hash()
        self.artifacts: list[str] = []
        self.t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def summary(self, payload: dict) -> dict:
        body = {"command": self.command, "config_hash": self.hash}
        body.update(payload)
        dump_json(self.path("summary.json"), body)
        return body

    def manifest(self, status: str = "ok") -> None:
        dump_json(self.out / "manifest.json", {
            "artifact": "artifact",
            "version": __version__,
            "command": self.command,
            "config": self.cfg.as_dict(),
            "config_hash": self.hash,
            "kernel_backend": BACKEND,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "status": status,
            "outputs": sorted(set(self.artifacts)),
            "wall_seconds": time.perf_counter() - self.t0,
        })


def _write_state(run: Run, prefix: str, state) -> dict:
    write_psf1(run.path(f"{prefix}_u.psf1"), state.u)
    write_psf1(run.path(f"{prefix}_v.psf1"), state.v)
    if state.scalar_bulk:
        return {"w_scalar": float(state.w)}
    write_pbf1(run.path(f"{prefix}_w.pbf1"), state.w)
    return {}


# -- commands -------------------------------------------------------------------


def cmd_simulate(cfg, run: Run) -> int:
    p = cfg.params()
    sig = cfg.signal()
    grid = sig.grid
    s0 = homogeneous_initial_state(grid, p, cfg["grid.nr"])
    extra = _write_state(run, "snapshot_initial", s0)
    T = cfg["time.T"]
    if T == 0:
        return EXIT_OK
    policy = DtPolicy(dt=cfg["time.dt"], dt_min=cfg["time.dt_min"], dt_max=cfg["time.dt_max"],
                      grow=cfg["time.grow"], grow_limit=cfg["time.dt_max"] / cfg["time.dt"])
    traj = run_to_time(s0, T, policy, p, sig, sample_every=cfg["time.sample_every"], keep_states=cfg["time.snapshots"])
    with open(run.path("timeseries.csv"), "w") as fh:
        fh.write(traj.CSV_HEADER + "\n")
        for row in traj.rows():
            fh.write(",".join(repr(x) for x in row) + "\n")
    if cfg["time.snapshots"]:
        for k, st in enumerate(traj.states[1:], 1):
            _write_state(run, f"snapshot_{k:04d}", st)
    final = traj.final
    extra.update(_write_state(run, "final", final))
    run.summary({
        "integrator": "imex_well_mixed" if p.infinite_diffusion else "imex_bulk",
        "scalar_w": p.infinite_diffusion,
        "T": T, "steps": traj.n_steps, "rejected_steps": traj.n_rejected,
        "mass_initial": float(traj.mass[0]), "mass_final": float(traj.mass[-1]),
        "mass_drift": traj.mass_drift(),
        "min_u": float(traj.min_u.min()), "min_v": float(traj.min_v.min()), "min_w": float(traj.min_w.min()),
        "lyapunov_final": float(traj.lyapunov[-1]), "rhs_norm_final": float(traj.rhs_norm[-1]),
        **{f"final_{k}": v for k, v in extra.items()},
    })
    return EXIT_OK


def cmd_steady(cfg, run: Run) -> int:
    from .steady import solve_steady

    p = cfg.params()
    sig = cfg.signal()
    st = solve_steady(p, sig, nr=cfg["grid.nr"], relax_T=cfg["steady.relax_T"], tol=cfg["steady.tol"])
    write_psf1(run.path("steady_u.psf1"), st.u)
    write_psf1(run.path("steady_v.psf1"), st.v)
    if not st.scalar_bulk:
        write_pbf1(run.path("steady_w.pbf1"), st.w)
    run.summary({"steady": st.summary()})
    return EXIT_OK if st.converged else EXIT_CONVERGENCE


def _critical(sig, ell):
    from .obstacle import critical_mass_Dinf, critical_mass_finiteD

    return critical_mass_finiteD(sig, ell) if ell > 0 else critical_mass_Dinf(sig)


def cmd_obstacle(cfg, run: Run) -> int:
    from .obstacle import localization_metrics, reconstruct_vw_finiteD, solve_for_mass_Dinf, solve_for_mass_finiteD

    p = cfg.params()
    sig = cfg.signal()
    ell = cfg.ell()
    rep = _critical(sig, ell)
    m = cfg["obstacle.mass"] or p.mass / p.a4
    sol = solve_for_mass_finiteD(m, sig, ell, rep) if ell > 0 else solve_for_mass_Dinf(m, sig, rep)
    write_psf1(run.path("obstacle_u.psf1"), sol.u)
    write_psf1(run.path("obstacle_xi.psf1"), sol.xi)
    payload = {"ell": ell, "target_mass": m, "critical": rep.to_json(), "solution": sol.summary(),
               "localization": localization_metrics(sol, sig), "notes": sol.notes}
    if ell > 0:
        pr = p if math.isclose(p.ell, ell, rel_tol=1e-12) else p.with_(D=p.a6 / ell)
        rec = reconstruct_vw_finiteD(sol, pr, sig)
        write_psf1(run.path("obstacle_v.psf1"), rec.v)
        write_psf1(run.path("obstacle_w_trace.psf1"), rec.w)
        payload["reconstruction"] = {"w_bar": rec.w_bar, "residuals": rec.residuals}
    run.summary(payload)
    return EXIT_OK if sol.converged else EXIT_CONVERGENCE


def cmd_critical_mass(cfg, run: Run) -> int:
    sig = cfg.signal()
    ell = cfg.ell()
    rep = _critical(sig, ell)
    dump_json(run.path("critical_mass.json"), {"config_hash": run.hash, **rep.to_json()})
    write_psf1(run.path("u_star.psf1"), rep.u_star.u)
    if rep.psi is not None:
        write_psf1(run.path("psi.psf1"), rep.psi)
    run.summary({"critical_mass": rep.to_json()})
    return EXIT_OK


# -- sweeps -----------------------------------------------------------------------


_WORKER_CACHE: dict = {}


def _sweep_setup(values: dict):
    cfg = config_mod.RunConfig(values)
    key = cfg.hash()
    if key not in _WORKER_CACHE:
        sig = cfg.signal()
        ell = cfg.ell()
        _WORKER_CACHE.clear()
        _WORKER_CACHE[key] = (cfg, sig, ell, {})
    return _WORKER_CACHE[key]


def _mass_point(values: dict, value: float) -> dict:
    from .obstacle import localization_metrics, solve_for_mass_Dinf, solve_for_mass_finiteD

    cfg, sig, ell, cache = _sweep_setup(values)
    if "report" not in cache:
        cache["report"] = _critical(sig, ell)
    rep = cache["report"]
    m = value * rep.m_star if cfg["sweep.relative"] else value
    sol = solve_for_mass_finiteD(m, sig, ell, rep) if ell > 0 else solve_for_mass_Dinf(m, sig, rep)
    lm = localization_metrics(sol, sig)
    return {"value": value, "mass": m, "m_star": rep.m_star, "alpha": sol.alpha, "alpha_star": rep.alpha_star,
            "polarized": sol.polarized, "inactive_fraction": sol.inactive_fraction,
            "kkt_residual": sol.kkt_residual, "converged": sol.converged,
            "support_radius": lm.get("support_radius"), "mean_identity_residual": lm.get("mean_identity_residual")}


def _D_point(values: dict, value: float) -> dict:
    from .steady import solve_steady

    cfg, sig, _, _ = _sweep_setup(values)
    p = cfg.params().with_(D=value)
    st = solve_steady(p, sig, nr=cfg["grid.nr"], relax_T=cfg["steady.relax_T"], tol=cfg["steady.tol"])
    var_w = st.w_deviation() ** 2 / (4.0 * math.pi / 3.0)
    return {"value": value, "D": value, "var_w": var_w, "w_deviation": st.w_deviation(), "converged": st.converged,
            "U_coeffs": st.u.coeffs.tolist(), "v_coeffs": st.v.coeffs.tolist()}


def _eps_chain(values: dict, eps_list: list) -> list:
    from .steady import continuation_eps

    cfg, sig, _, _ = _sweep_setup(values)
    p = cfg.params().with_(eps=eps_list[0])
    recs = continuation_eps(p, sig, eps_list, nr=cfg["grid.nr"], relax_T=cfg["steady.relax_T"], tol=cfg["steady.tol"])
    return [{"value": r["eps"], "eps": r["eps"], "l1_error": r["l1_error"], "xi_min": r["xi_range"][0],
             "xi_max": r["xi_range"][1], "converged": r["converged"]} for r in recs]


def _dispatch(fn, values, points, workers):
    if workers <= 1 or len(points) <= 1:
        return [fn(values, x) for x in points]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        # map keeps submission order, so the collector sees points in order
        return list(ex.map(fn, [values] * len(points), points))


def cmd_sweep(cfg, run: Run, workers: int = 1) -> int:
    kind = cfg["sweep.kind"]
    pts = cfg.sweep_values()
    values = dict(cfg.values)
    if kind == "mass":
        rows = _dispatch(_mass_point, values, pts, workers)
    elif kind == "D":
        rows = _dispatch(_D_point, values, pts + [math.inf], workers)
        ref = rows.pop()
        U_ref, v_ref = np.array(ref["U_coeffs"]), np.array(ref["v_coeffs"])
        for r in rows:
            U, v = np.array(r.pop("U_coeffs")), np.array(r.pop("v_coeffs"))
            r["distance_to_Dinf"] = float(math.sqrt(np.sum((U - U_ref) ** 2) + np.sum((v - v_ref) ** 2)))
    else:
        if any(b >= a for a, b in zip(pts, pts[1:])):
            raise ConfigError("sweep.values must be strictly decreasing for an eps sweep")
        rows = _eps_chain(values, pts)
    for r in rows:
        r["config_hash"] = run.hash
    with open(run.path("sweep.jsonl"), "w") as fh:
        for r in rows:
            fh.write(json.dumps(jsonable(r), sort_keys=True) + "\n")
    cols = [k for k in rows[0] if k != "config_hash"] + ["config_hash"]
    with open(run.path("sweep.csv"), "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(jsonable(r[c])) for c in cols) + "\n")
    agg = {"kind": kind, "points": len(rows), "all_converged": all(r["converged"] for r in rows)}
    if kind == "mass":
        flags = [r["polarized"] for r in rows]
        agg["polarization_flips"] = sum(a != b for a, b in zip(flags, flags[1:]))
        agg["m_star"] = rows[0]["m_star"]
    elif kind == "eps":
        e = [r["l1_error"] for r in rows]
        agg["l1_error_decreasing"] = all(b < a for a, b in zip(e, e[1:]))
    else:
        vw = [r["var_w"] for r in rows]
        agg["var_w_decreasing"] = all(b < a for a, b in zip(vw, vw[1:]))
    run.summary({"sweep": agg})
    return EXIT_OK if agg["all_converged"] else EXIT_CONVERGENCE


# -- validation ---------------------------------------------------------------------


def _check(name, anchor, value, threshold, passed=None):
    if passed is None:
        passed = bool(value <= threshold)
    return {"name": name, "anchor": anchor, "value": value, "threshold": threshold, "passed": bool(passed)}


def validation_suite(cfg) -> list:
    """Fast invariant checks on the configured model and signal."""
    from . import experiments as ex
    from .model import constant_signal
    from .obstacle import critical_mass_Dinf, localization_metrics, solve_for_mass_Dinf
    from .spectral import sphere_grid
    from .steady import homogeneous_state, solve_steady

    checks = []
    L = cfg["grid.L"]
    sig = cfg.signal()
    p = cfg.params()

    r = ex.operator_conformance(L=min(L, 16), n_random=5)
    checks.append(_check("operator_identities", "spectral operators: eigen relations, T Lap u = -N u - (u - mean u), N self-adjoint and positive",
                         r["max_error"], 1e-10))
    r = ex.dtn_crosscheck()
    checks.append(_check("dtn_order", "Dirichlet-to-Neumann map against radial differences of the harmonic extension",
                         min(r["orders"]), 1.9, min(r["orders"]) >= 1.9))

    T = min(cfg["time.T"], 0.5) or 0.5
    s0 = homogeneous_initial_state(sig.grid, p, min(cfg["grid.nr"], 32))
    traj = run_to_time(s0, T, DtPolicy(dt=cfg["time.dt"], dt_min=cfg["time.dt_min"]), p, sig)
    checks.append(_check("mass_conservation", "conservation of total mass by the evolution", traj.mass_drift(), 1e-10))
    neg = max(0.0, -min(traj.min_u.min(), traj.min_v.min(), traj.min_w.min()))
    checks.append(_check("nonnegativity", "nonnegativity of the evolution", float(neg), 1e-8))

    kappa = float(sig.c.mean())
    sc = constant_signal(sphere_grid(min(L, 8)), kappa, p.a5)
    st = solve_steady(p, sc, nr=min(cfg["grid.nr"], 32))
    U, v, _ = homogeneous_state(p, kappa)
    gap = max(abs(st.u.mean() - U), abs(st.v.mean() - v))
    checks.append(_check("homogeneous_state", "constant signal gives the homogeneous stationary state", gap, 1e-8))

    r = ex.manufactured_critical(L=16)
    checks.append(_check("manufactured_critical_mass", "critical mass of the manufactured signal",
                         r["m_star_rel_error"], 1e-3))

    if not sig.is_constant():
        rep = critical_mass_Dinf(sig)
        sol = solve_for_mass_Dinf(0.5 * rep.m_star, sig, rep)
        checks.append(_check("obstacle_complementarity", "complementarity of the obstacle problem",
                             sol.kkt_residual, 1e-8))
        W = sig.grid.weights
        g = sig.g_nodes(sig.grid)
        chi = sol.active_weight
        alpha_id = float(np.sum(W * chi * (1 - g)) / np.sum(W * chi * g))
        checks.append(_check("multiplier_identity", "multiplier equals the active-set ratio of (1 - g) to g",
                             abs(alpha_id - sol.alpha), 1e-6))
        lm = localization_metrics(sol, sig)
        checks.append(_check("mean_identity", "active-set mean of 1 - g/g_max against the multiplier gap",
                             lm["mean_identity_residual"], 1e-6))
        checks.append(_check("xi_range", "xi lies in [0, 1]",
                             float(max(-sol.xi_nodes.min(), sol.xi_nodes.max() - 1, 0.0)), 1e-8))

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "f.psf1")
        write_psf1(path, sig.c)
        back = read_psf1(path)
        err = float(np.max(np.abs(back.coeffs - sig.c.coeffs)))
        if not s0.scalar_bulk:
            bpath = os.path.join(tmp, "w.pbf1")
            write_pbf1(bpath, s0.w)
            err = max(err, float(np.max(np.abs(read_pbf1(bpath).profiles - s0.w.profiles))))
        checks.append(_check("file_round_trip", "PSF1/PBF1 write and read", err, 0.0))
    return checks


def cmd_validate(cfg, run: Run) -> int:
    checks = validation_suite(cfg)
    ok = all(c["passed"] for c in checks)
    dump_json(run.path("validate.json"), {"config_hash": run.hash, "checks": checks, "passed": ok})
    run.summary({"passed": ok, "checks": {c["name"]: c["passed"] for c in checks}})
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']:<28} {c['value']!s:<24} [{c['anchor']}]")
    return EXIT_OK if ok else EXIT_CONVERGENCE


COMMANDS = {
    "simulate": cmd_simulate,
    "steady": cmd_steady,
    "obstacle": cmd_obstacle,
    "critical-mass": cmd_critical_mass,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cellpol", description="Cell polarization model on the unit sphere.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, default=None, help="flat key = value configuration file")
    ap.add_argument("--out", type=Path, default=Path("cellpol_out"), help="output directory")
    ap.add_argument("--workers", type=int, default=1, help="worker processes for sweeps")
    ap.add_argument("overrides", nargs="*", metavar="key=value", help="dotted configuration overrides")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    try:
        cfg = config_mod.load(args.config, args.overrides)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
    except ConfigError as exc:
        print(f"cellpol: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cellpol: {exc}", file=sys.stderr)
        return EXIT_IO
    run = None
    try:
        run = Run(args.command, cfg, args.out)
        fn = COMMANDS[args.command]
        code = fn(cfg, run, args.workers) if args.command == "sweep" else fn(cfg, run)
        status = "ok" if code == EXIT_OK else "not converged"
    except (ConfigError, DomainError) as exc:
        print(f"cellpol: invalid configuration: {exc}", file=sys.stderr)
        code, status = EXIT_CONFIG, "invalid config"
    except (ConvergenceError, ConsistencyError) as exc:
        print(f"cellpol: {exc}", file=sys.stderr)
        code, status = EXIT_CONVERGENCE, "not converged"
    except (OSError, FieldFormatError) as exc:
        print(f"cellpol: I/O error: {exc}", file=sys.stderr)
        code, status = EXIT_IO, "io error"
    if run is not None:
        try:
            run.manifest(status)
        except OSError as exc:
            print(f"cellpol: cannot write manifest: {exc}", file=sys.stderr)
            return EXIT_IO
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
