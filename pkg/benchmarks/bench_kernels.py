"""Numba kernels vs the pure-numpy reference path.

    python benchmarks/bench_kernels.py [--repeat 3] [--csv out.csv]

The backend is chosen per call from STOCHQHO_BACKEND, so both paths run in
one process.  The first numba call (compilation) is timed separately.  Each
pair of results is also compared, since the two paths must agree.
"""
import argparse
import os
import time

import numpy as np

from stochqho import fokker_planck as fp
from stochqho.scenario import ScenarioConfig, TimeProfile
from stochqho.sde import simulate_z
from stochqho.wavefunction import cnm_batch, generating_coefficients

T = 2 * np.pi


def _sde():
    cfg = ScenarioConfig(eps1=0.01, eps2=0.01, p1=TimeProfile.window(0, 2 * T),
                         p2=TimeProfile.window(0, 2 * T), t_min=-5, t_max=3 * T)
    ens = simulate_z(cfg, 2000, seed=3)
    return ens.states[-1]


def _fp():
    cfg = ScenarioConfig(eps1=0.02, eps2=0.02, p1=TimeProfile.window(0, T),
                         p2=TimeProfile.window(0, T), t_min=-5, t_max=2 * T)
    axes = fp.default_axes4(cfg, n=20)
    return fp.solve_fp4d(cfg, (0.0, 0.5), axes=axes, leak_tol=None).final.values


def _cnm():
    rng = np.random.default_rng(0)
    n = 20000
    r = 1 + 0.1 * rng.standard_normal(n)
    g = rng.uniform(0, 2 * np.pi, n)
    xi = r * np.exp(1j * g)
    dxi = 1j * xi / r ** 2 + 0.05 * rng.standard_normal(n)
    gen = generating_coefficients(xi, dxi, 0.1 * rng.standard_normal(n),
                                  0.1 * rng.standard_normal(n), np.zeros(n), 1.0, 1.0, 1.0)
    return cnm_batch(gen, 16)


CASES = {"sde_heun_2000x600": _sde, "fp4d_rk4_20^4": _fp, "cnm_20000x17^2": _cnm}


def timed(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)
    old = os.environ.get("STOCHQHO_BACKEND")
    rows = []
    try:
        for name, fn in CASES.items():
            os.environ["STOCHQHO_BACKEND"] = "numba"
            t0 = time.perf_counter()
            fn()  # compile
            first = time.perf_counter() - t0
            t_nb, a = timed(fn, args.repeat)
            os.environ["STOCHQHO_BACKEND"] = "numpy"
            t_np, b = timed(fn, max(1, args.repeat // 3))
            diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
            rows.append((name, first, t_nb, t_np, t_np / t_nb, diff))
            print(f"{name:22s} first {first:7.3f}s  numba {t_nb:7.3f}s  numpy {t_np:7.3f}s  "
                  f"speedup {t_np / t_nb:6.1f}x  max|diff| {diff:.2e}")
    finally:
        if old is None:
            os.environ.pop("STOCHQHO_BACKEND", None)
        else:
            os.environ["STOCHQHO_BACKEND"] = old
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("case,first_call_s,numba_s,numpy_s,speedup,max_abs_diff\n")
            for r in rows:
                fh.write(f"{r[0]},{r[1]!r},{r[2]!r},{r[3]!r},{r[4]!r},{r[5]!r}\n")
    return rows


if __name__ == "__main__":
    main()
