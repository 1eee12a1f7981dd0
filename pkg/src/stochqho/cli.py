"""Batch front-end.

    stochqho <subcommand> --config FILE [--seed N] [--out DIR] ...

Subcommands: classical, mc, transitions, fp, thermo, verify.  Each run writes
CSV files plus manifest.json into --out.  Exit codes:

    0  success
    1  verify: at least one check failed
    2  bad command line or config
    3  numerical module failure (error.json holds the record)
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .scenario import ScenarioConfig, load_config, validate

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    scenario_hash: str
    regimes: list
    seed: int
    version: str
    outputs: list = field(default_factory=list)
    threads: int = 1
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, out_dir):
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=str)


def _csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(v if isinstance(v, str) else repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in r) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_classical(cfg, args, man):
    from .classical import solve_classical

    sol = solve_classical(cfg)
    path = os.path.join(args.out, "classical.csv")
    sol.to_csv(path)
    man.outputs.append(path)
    return EXIT_OK


def cmd_mc(cfg, args, man):
    from .transitions import w_nm_mc

    n_max = args.nmax if args.nmax is not None else min(cfg.n_max, 8)
    tab = w_nm_mc(cfg, args.paths, n_max=n_max, dt=args.dt, seed=args.seed,
                  threads=args.threads)
    path = os.path.join(args.out, "mc_transitions.csv")
    tab.to_csv(path)
    man.outputs.append(path)
    man.extra.update(flagged=tab.meta["flagged"], n=tab.meta["n"])
    return EXIT_OK


def _regimes_for(cfg):
    if cfg.eps1 == 0:
        return ["eps1_zero"]
    if cfg.eps2 == 0:
        return ["eps2_zero_reduced"]
    return ["general"]


def cmd_transitions(cfg, args, man):
    from . import transitions as tr

    regimes = args.regime.split(",") if args.regime else _regimes_for(cfg)
    man.regimes = regimes
    for reg in regimes:
        if reg == "eps1_zero":
            tab = tr.w_nm_eps1_zero(cfg, n_max=args.nmax)
        elif reg == "eps2_zero_full":
            tab = tr.w_nm_eps2_zero_full(cfg, n_max=min(args.nmax or 1, 1), n=args.grid)
        elif reg == "eps2_zero_reduced":
            tab = tr.w_nm_eps2_zero_reduced(cfg)
        elif reg == "general":
            tab = tr.w_nm_general(cfg)
        elif reg == "mc":
            tab = tr.w_nm_mc(cfg, args.paths, n_max=args.nmax or min(cfg.n_max, 8), dt=args.dt,
                             seed=args.seed, threads=args.threads)
        else:
            raise UsageError(f"unknown regime {reg!r}")
        path = os.path.join(args.out, f"transitions_{reg}.csv")
        tab.to_csv(path)
        man.outputs.append(path)
        man.extra[f"row0_sum_{reg}"] = float(np.nansum(tab.W[0]))
    return EXIT_OK


def cmd_fp(cfg, args, man):
    from . import fokker_planck as fp
    from .classical import solve_classical

    sol = solve_classical(cfg)
    t_end = cfg.t_max if args.t_end is None else args.t_end
    if cfg.eps1 == 0:
        res = fp.solve_fp2d(cfg, (cfg.t2, t_end), solution=sol, n=args.grid)
        g = res.final
        path = os.path.join(args.out, "fp2d_slice.csv")
        g.slice_csv(path, (0, 1))
    else:
        axes = fp.default_axes4(cfg, n=args.grid)
        res = fp.solve_fp4d(cfg, (min(cfg.t1, cfg.t2), t_end), axes=axes, solution=sol,
                            leak_tol=None)
        g = res.final
        act = [i for i, a in enumerate(axes) if not a.collapsed]
        path = os.path.join(args.out, "fp4d_slice.csv")
        g.slice_csv(path, tuple(act[-2:]))
    grid_path = os.path.join(args.out, "fp_final.grid")
    g.save(grid_path)
    man.outputs += [path, grid_path]
    man.extra.update(mass=float(res.mass[-1]), mass0=float(res.mass0), min_value=res.min_value,
                     n_steps=res.n_steps)
    return EXIT_OK


def cmd_thermo(cfg, args, man):
    from . import thermodynamics as th
    from .sde import simulate_u

    w = cfg.omega_in
    betas = [0.25, 0.5, math.log(2), 1.0, 2.0, 4.0]
    p = _csv(os.path.join(args.out, "planck.csv"), ["beta", "w0"],
             [(b, th.planck_w0(b)) for b in betas])
    man.outputs.append(p)
    eps_list = [float(e) * w ** 3 for e in args.eps_list.split(",")]
    x = np.linspace(-6 / math.sqrt(w), 6 / math.sqrt(w), 121)
    rows, erows = [], []
    from .scenario import TimeProfile

    for e in eps_list:
        c = cfg.with_(eps1=e, eps2=0.0, p1=TimeProfile.constant(1.0) if e > 0 else cfg.p1)
        ens = simulate_u(c, args.paths, seed=args.seed, dt=args.dt, threads=args.threads)
        rho, _ = th.build_rho0(c, ens, x)
        s = th.entropy_averaged(rho)
        rows.append((e, s.normalized, s.raw, th.trace_x(rho)))
        en = th.ground_energy(c, lam=args.lam)
        erows.append((args.lam, e, en.E0, en.shift, en.broadening, en.lifetime))
    man.outputs.append(_csv(os.path.join(args.out, "entropy.csv"),
                            ["eps1", "S_normalized", "S_raw", "trace"], rows))
    man.outputs.append(_csv(os.path.join(args.out, "energy.csv"),
                            ["lambda", "eps1", "E0", "shift", "broadening", "lifetime"], erows))
    return EXIT_OK


def cmd_verify(cfg, args, man):
    """Cross-check the pipelines that apply to this scenario."""
    from . import transitions as tr
    from .classical import solve_classical

    checks = []
    sol = solve_classical(cfg)
    wr = float(np.max(np.abs(sol.wronskian() - cfg.omega_in)))
    checks.append(("wronskian", wr < 1e-7, wr))
    n_max = args.nmax if args.nmax is not None else min(cfg.n_max, 8)
    mc = tr.w_nm_mc(cfg, args.paths, n_max=n_max, solution=sol, seed=args.seed, dt=args.dt,
                    threads=args.threads)
    tables = {"mc": mc}
    if cfg.eps1 == 0:
        q = tr.w_nm_eps1_zero(cfg, n_max=n_max, solution=sol, require_plateau=False)
        tables["eps1_zero"] = q
        d = np.abs(q.W - mc.W)
        tol = np.maximum(3 * mc.err, 1e-9)
        checks.append(("quadrature_vs_mc", bool(np.all(d <= tol)), float(np.max(d - tol))))
        row = float(np.sum(q.W[0]))
        checks.append(("row0_unitarity", abs(row - 1) < 1e-3, row))
        if cfg.eps2 == 0:
            ident = cfg.omega_in == cfg.omega_out and cfg.f0.kind == "constant" and cfg.f0.value == 0 \
                and cfg.omega0_sq.kind == "constant"
            if ident:
                err = float(np.max(np.abs(q.W - np.eye(n_max + 1))))
                checks.append(("identity", err < 1e-8, err))
            checks.append(("mc_stderr_zero", float(np.max(mc.err)) == 0.0, float(np.max(mc.err))))
    else:
        row = float(np.sum(mc.W[0]))
        checks.append(("mc_row0_unitarity", abs(row - 1) < max(3 * float(np.sqrt(np.sum(mc.err[0] ** 2))), 1e-3), row))
        checks.append(("mc_flagged", mc.meta["flagged"] <= 0.01, mc.meta["flagged"]))
    for name, tab in tables.items():
        p = os.path.join(args.out, f"verify_{name}.csv")
        tab.to_csv(p)
        man.outputs.append(p)
    p = _csv(os.path.join(args.out, "verify_checks.csv"), ["check", "pass", "value"],
             [(n, "PASS" if ok else "FAIL", v) for n, ok, v in checks])
    man.outputs.append(p)
    for n, ok, v in checks:
        print(f"{'PASS' if ok else 'FAIL'} {n} {v:.3e}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_CHECK


COMMANDS = {"classical": cmd_classical, "mc": cmd_mc, "transitions": cmd_transitions,
            "fp": cmd_fp, "thermo": cmd_thermo, "verify": cmd_verify}


def build_parser():
    ap = argparse.ArgumentParser(prog="stochqho", description=__doc__.split("\n")[0])
    ap.add_argument("subcommand", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="scenario TOML file")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--regime", default=None,
                    help="comma list: eps1_zero, eps2_zero_full, eps2_zero_reduced, general, mc")
    ap.add_argument("--nmax", type=int, default=None)
    ap.add_argument("--paths", type=int, default=4000)
    ap.add_argument("--dt", type=float, default=None)
    ap.add_argument("--out", default="out")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (env STOCHQHO_THREADS)")
    ap.add_argument("--grid", type=int, default=64, help="points per FP axis")
    ap.add_argument("--t-end", type=float, default=None)
    ap.add_argument("--eps-list", default="0,0.02,0.05",
                    help="thermo sweep of eps1 / Omega_in^3")
    ap.add_argument("--lam", type=float, default=1.0)
    return ap


def _error_record(out, kind, exc):
    rec = {"error": kind, "type": type(exc).__name__, "message": str(exc),
           "traceback": traceback.format_exc(limit=5)}
    try:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "error.json"), "w") as fh:
            json.dump(rec, fh, indent=2)
    except OSError:
        pass
    print(json.dumps({k: rec[k] for k in ("error", "type", "message")}), file=sys.stderr)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        problems = validate(cfg)
        if problems:
            raise UsageError("; ".join(problems))
        if args.seed is not None:
            cfg = cfg.with_(seed=args.seed)
        args.seed = cfg.seed
        if args.threads is not None:
            os.environ["STOCHQHO_THREADS"] = str(args.threads)
        os.makedirs(args.out, exist_ok=True)
    except (UsageError, OSError, ValueError, TypeError) as exc:
        _error_record(args.out, "usage", exc)
        return EXIT_USAGE
    from .sde import default_threads

    man = RunManifest(args.subcommand, cfg.scenario_hash(), [], cfg.seed, __version__,
                      threads=args.threads or default_threads())
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.subcommand](cfg, args, man)
    except UsageError as exc:
        _error_record(args.out, "usage", exc)
        return EXIT_USAGE
    except Exception as exc:  # any module failure becomes a machine-readable record
        _error_record(args.out, "failure", exc)
        return EXIT_FAILURE
    man.wall_clock = time.perf_counter() - t0
    man.write(args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
