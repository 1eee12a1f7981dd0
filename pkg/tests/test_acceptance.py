"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line
that the terminal summary prints at the end of the run."""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, config_path
from stochqho import fokker_planck as fp
from stochqho import thermodynamics as th
from stochqho import transitions as tr
from stochqho.classical import solve_classical
from stochqho.feynman_kac import (FunctionalSpec, brownian_generator,
                                  integral_equation_residual, kac_exact, mc_functional,
                                  neumann_terms, solve_Q)
from stochqho.scenario import ScenarioConfig, TimeProfile, load_config
from stochqho.sde import (ito_moment_solution, ito_path_residual, simulate_eta,
                          simulate_ito_wavefunction, simulate_u, simulate_z)
from stochqho.wavefunction import TrajectoryPoint, psi_stc_all

T = 2 * math.pi


def record(k, ok, detail, elapsed=None):
    if elapsed is not None:
        detail = f"{detail}  [{elapsed:.1f} s]"
    ACCEPTANCE[k] = (bool(ok), detail)


def _rel_inf(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def _gauss(axes, center, sd):
    vals = np.ones([a.n for a in axes])
    for i, a in enumerate(axes):
        if a.collapsed:
            continue
        shape = [1] * 4
        shape[i] = a.n
        vals = vals * np.exp(-0.5 * ((a.coords - center[i]) / sd[i]) ** 2).reshape(shape)
    g = fp.GridFunction(axes, vals)
    g.values /= g.mass()
    return g


def test_criterion_01_no_noise_identity():
    t0 = time.perf_counter()
    cfg = load_config(config_path("no_noise.toml"))
    sol = solve_classical(cfg)
    q = tr.w_nm_eps1_zero(cfg, n_max=8, solution=sol)
    mc = tr.w_nm_mc(cfg, 64, n_max=8, solution=sol)
    el = time.perf_counter() - t0
    e_q = float(np.max(np.abs(q.W - np.eye(9))))
    e_mc = float(np.max(np.abs(mc.W - np.eye(9))))
    s_mc = float(np.max(mc.err))
    ok = e_q < 1e-8 and e_mc < 1e-8 and s_mc == 0.0 and el < 1.0
    record(1, ok, f"|W-I| quad {e_q:.1e}, MC {e_mc:.1e}, MC stderr {s_mc:g}", el)
    assert ok


def test_criterion_02_orthonormality():
    t0 = time.perf_counter()
    cfg = ScenarioConfig(eps1=0.02, eps2=0.05, p1=TimeProfile.window(0.0, 2 * T),
                         p2=TimeProfile.window(0.0, 2 * T), t_min=-5.0, t_max=3 * T, seed=23)
    ens = simulate_z(cfg, 20, t_end=1.5 * T)
    xi, dxi = ens.xi()
    s = ens.states[-1]
    worst = 0.0
    for p in range(20):
        tp = TrajectoryPoint(float(ens.times[-1]), complex(xi[p]), complex(dxi[p]),
                             float(s[0][p]), float(s[1][p]), float(ens.sigma_start + s[6][p]),
                             float(ens.gamma_start + s[5][p]))
        x = np.linspace(tp.eta - 14 * tp.r, tp.eta + 14 * tp.r, 4001)
        psi = psi_stc_all(8, x, tp, cfg.omega_in)
        G = (psi.conj() @ psi.T) * (x[1] - x[0])
        worst = max(worst, float(np.max(np.abs(G - np.eye(9)))))
    el = time.perf_counter() - t0
    ok = worst < 1e-8 and not ens.flags.any() and el < 30
    record(2, ok, f"max |<Psi_n,Psi_m> - delta| = {worst:.1e} over 20 paths", el)
    assert ok


def test_criterion_03_gaussian_theorem():
    t0 = time.perf_counter()
    cfg = ScenarioConfig(eps2=0.05, p2=TimeProfile.constant(1.0), t2=0.0, t_min=-5.0,
                         t_max=3 * T, seed=21)
    sol = solve_classical(cfg)
    # a delta is not resolvable on a grid: start from the closed form a quarter
    # period after switch-on and run one full period
    ta, tb = T / 4, T / 4 + T
    P = fp.analytic_P1(cfg, sol, tb, n=256)
    start = fp.GridFunction(P.axes, fp.p1_density(cfg, sol, ta, *P.mesh()[:2]), ta)
    r = fp.solve_fp2d(cfg, (ta, tb), axes=P.axes, start=start, solution=sol, leak_tol=None)
    err = _rel_inf(r.final.values, P.values)

    mean, cov = fp.p1_covariance(cfg, sol, tb)
    X = simulate_eta(cfg, 100_000, solution=sol, t_end=tb).states[-1, :2]
    n = X.shape[1]
    z_mean = np.abs(X.mean(axis=1) - mean) / (X.std(axis=1, ddof=1) / math.sqrt(n))
    D = X - mean[:, None]
    z_cov = []
    for i, j in ((0, 0), (0, 1), (1, 1)):
        prod = D[i] * D[j]
        z_cov.append(abs(prod.mean() - cov[i, j]) / (prod.std(ddof=1) / math.sqrt(n)))
    zmax = float(max(z_mean.max(), max(z_cov)))
    el = time.perf_counter() - t0
    ok = err < 1e-3 and zmax < 3 and el < 120
    record(3, ok, f"256^2 FP vs P1 L_inf {err:.1e}; 1e5-path MC moments max z = {zmax:.2f}",
           el)
    assert ok


def test_criterion_04_unitarity_under_force_noise():
    t0 = time.perf_counter()
    cfg = load_config(config_path("force_noise.toml"))
    q = tr.w_nm_eps1_zero(cfg, n_max=32)
    el = time.perf_counter() - t0
    dev = abs(float(np.sum(q.W[0])) - 1)
    ok = dev < 1e-3 and el < 60
    record(4, ok, f"|sum_m<=32 W0m - 1| = {dev:.1e}", el)
    assert ok


def test_criterion_05_feynman_kac():
    t0 = time.perf_counter()
    gen = brownian_generator(8.0, 401)
    lam = 0.5
    spec = FunctionalSpec(0.0, 1.0, V1=lambda X, xp: lam * X[0] ** 2)
    f = solve_Q(gen, spec, (0.0,), dt=2e-3, keep_history=True)
    mc = mc_functional(gen, spec, (0.0,), 100_000, dt=2e-3, seed=5)
    q = f.average()
    e_mc = abs(q - mc.mean) / mc.mean
    rel, _ = integral_equation_residual(f.history, gen, spec, (0.0,), dt=2e-3)

    small = FunctionalSpec(0.0, 1.0, V1=lambda X, xp: 0.1 * X[0] ** 2)
    qs = solve_Q(gen, small, (0.0,), dt=2e-3).average()
    nr = neumann_terms(gen, small, (0.0,), 4, dt=2e-3)
    e_neu = abs(nr.partial_sums[4].integrate() - qs) / qs
    el = time.perf_counter() - t0
    ok = e_mc < 0.02 and e_neu < 0.01 and rel < 1e-3 and el < 120
    record(5, ok, f"Q {q:.5f} (exact {kac_exact(lam, 1.0):.5f}) vs MC {mc.mean:.5f}: "
                  f"{e_mc:.1e}; Neumann k=4 {e_neu:.1e}; residual {rel:.1e}", el)
    assert ok


def test_criterion_06_regime_reductions():
    t0 = time.perf_counter()
    n = 32
    # eps1 = 0: the (z1, z2) marginal is the closed-form Gaussian
    cfg = ScenarioConfig(eps2=0.05, p2=TimeProfile.constant(1.0), t2=0.0, t_min=-5.0,
                         t_max=3 * T)
    sol = solve_classical(cfg)
    ta, tb = T / 4, 3 * T / 4
    P = fp.analytic_P1(cfg, sol, tb, n=n)
    ax = (P.axes[0], P.axes[1], fp.Axis(-0.8, 0.8, n), fp.Axis(0.3, 1.7, n))
    Z = np.meshgrid(*[a.coords for a in ax], indexing="ij")
    v = fp.p1_density(cfg, sol, ta, Z[0], Z[1]) \
        * np.exp(-0.5 * (Z[2] / 0.12) ** 2 - 0.5 * ((Z[3] - 1) / 0.12) ** 2)
    start = fp.GridFunction(ax, v, ta)
    start.values /= start.mass()
    r = fp.solve_fp4d(cfg, (ta, tb), axes=ax, start=start, solution=sol, leak_tol=None,
                      order=4)
    e_a = _rel_inf(r.final.marginal((0, 1)).values, P.squeeze().values)

    # eps2 = 0: the (z3, z4) marginal solves the frequency-noise equation; the
    # reference is that equation alone on a fine grid
    cfg = ScenarioConfig(eps1=0.05, p1=TimeProfile.constant(1.0), t1=0.0, t_min=-5.0,
                         t_max=3 * T)
    sol = solve_classical(cfg)
    b3, b4 = (-1.6, 1.6), (0.1, 2.6)
    ax = (fp.Axis(-3, 3, n), fp.Axis(-3, 3, n), fp.Axis(*b3, n), fp.Axis(*b4, n))
    r = fp.solve_fp4d(cfg, (0.0, T / 4), axes=ax, start=_gauss(ax, (0, 0, 0, 1), (0.6,) * 2 + (0.25,) * 2),
                      solution=sol, leak_tol=None, order=4)
    m = r.final.marginal((2, 3))
    axr = (fp.Axis.point(0.0), fp.Axis.point(0.0), fp.Axis(*b3, 257), fp.Axis(*b4, 257))
    rr = fp.solve_fp4d(cfg, (0.0, T / 4), axes=axr, start=_gauss(axr, (0, 0, 0, 1), (1, 1, 0.25, 0.25)),
                       solution=sol, leak_tol=None)
    M = np.stack([g.ravel() for g in m.mesh()], axis=1)
    ref = rr.final.interpolate(np.column_stack([np.zeros((len(M), 2)), M])).reshape(m.shape)
    e_b = _rel_inf(m.values, ref)
    el = time.perf_counter() - t0
    ok = e_a < 1e-2 and e_b < 1e-2 and el < 300
    record(6, ok, f"32^4 marginals: eps1=0 vs P1 {e_a:.1e}, eps2=0 vs reduced FP {e_b:.1e}",
           el)
    assert ok


def test_criterion_07_three_way_w00():
    t0 = time.perf_counter()
    cfg = load_config(config_path("frequency_window.toml"))
    assert cfg.eps1 / cfg.omega_in ** 3 == 0.01
    sol = solve_classical(cfg)
    red = tr.w_nm_eps2_zero_reduced(cfg, solution=sol).W[0, 0]
    ax = fp.make_axes(0.0, 0.0, (-8, 8, 321), (0.1, 4, 161))
    full_t = tr.w_nm_eps2_zero_full(cfg, n_max=0, axes=ax, solution=sol, leak_check=True,
                                    require_plateau=False)
    full = full_t.W[0, 0]
    mc_t = tr.w_nm_mc(cfg, 20_000, n_max=0, t_end=full_t.meta["t_end"], solution=sol)
    mc, se = mc_t.W[0, 0], mc_t.err[0, 0]
    el = time.perf_counter() - t0
    vals = {"reduced": red, "full": full, "MC": mc}
    worst = 0.0
    ok = el < 900
    names = list(vals)
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = vals[names[i]], vals[names[j]]
            d = abs(a - b)
            tol = max(2 * se, 0.05 * max(abs(a), abs(b)))
            worst = max(worst, d / tol)
            ok = ok and d <= tol
    record(7, ok, f"W00 reduced {red:.4f}, full {full:.4f} (leak {full_t.meta['leak']:.1e}), "
                  f"MC {mc:.4f}+-{se:.4f}; worst |diff|/tol {worst:.2f}", el)
    assert ok


def test_criterion_08_pairing_and_scale_invariance():
    t0 = time.perf_counter()
    ax = fp.conjugate_axes(1.0, n3=481, n4=321, L=8.0, U=8.0)
    Y = fp.solve_conjugate("conjugate_energy", 0.005, 1.0, p=1, axes=ax, scheme="central")
    times, pair = fp.pairing_series(Y, (0.0, 10 * T), T / 400, 400)
    drift = float(np.max(np.abs(pair - pair[0])) / abs(pair[0]))

    Yu = fp.solve_conjugate("conjugate_energy", 0.05, 1.0, p=1, axes=fp.conjugate_axes(1.0, 161, 81))
    q = fp.solve_line_stationary(0.05, 1.0, p=1, L=40.0, n=1601)
    u0 = (0.0, 0.0, 0.0, 1.0)
    c0 = fp.normalization_constant(q, Yu, u0, 1.0)
    worst = 0.0
    for a, b in ((1e-3, 7.0), (3.7, 1e-5), (1e6, 0.25)):
        Ys = fp.StationarySolution(fp.GridFunction(Yu.q.axes, a * Yu.q.values), 0.0, 0.0,
                                   "conjugate_energy", Yu.meta)
        c1 = fp.normalization_constant(fp.GridFunction(q.q.axes, b * q.q.values), Ys, u0, 1.0)
        worst = max(worst, abs(c1 * b - c0) / abs(c0))
    el = time.perf_counter() - t0
    ok = drift < 5e-3 and worst < 1e-13 and el < 300
    record(8, ok, f"int Y Q drift over 10 periods {drift:.1e}; C scale invariance {worst:.1e}",
           el)
    assert ok


THERMO = {}


def _thermo_runs():
    if THERMO:
        return THERMO
    base = ScenarioConfig(t_min=-5.0, t_max=3 * T, t1=0.0, seed=31)
    x = np.linspace(-6.0, 6.0, 121)
    ent, singles = [], []
    for e in (0.0, 0.02, 0.05):
        c = base.with_(eps1=e, p1=TimeProfile.window(0.0, 2 * T))
        rho, one = th.build_rho0(c, simulate_u(c, 2000), x, keep=5)
        ent.append(th.entropy_averaged(rho).normalized)
        singles += one
    THERMO["entropy"] = ent
    THERMO["rank"] = max(d.rest / d.lambda1 for d in map(th.entropy_formal_partial, singles))
    THERMO["energy"] = {e: th.ground_energy(base.with_(eps1=e, p1=TimeProfile.constant(1.0)))
                        for e in (0.001, 0.005, 0.02, 0.05)}
    return THERMO


def _thermo_detail(k_ok):
    ok = all(k_ok.values())
    return ok, ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in k_ok.items())


def test_criterion_09_thermodynamics():
    t0 = time.perf_counter()
    r = _thermo_runs()
    s = r["entropy"]
    en = r["energy"]
    checks = {
        "planck": abs(th.planck_w0(math.log(2)) - math.sqrt(2)) < 1e-12,
        "rank-one": r["rank"] < 1e-10,
        "S(0)=0": abs(s[0]) < 1e-10,
        "S increasing": s[0] < s[1] < s[2],
        "lifetime*broadening": all(abs(v.lifetime * v.broadening - 1) < 1e-12 for v in en.values()),
    }
    el = time.perf_counter() - t0
    ok, detail = _thermo_detail(checks)
    THERMO["structural"] = (ok, f"{detail}; S = {s[0]:.1e}/{s[1]:.3f}/{s[2]:.3f}")
    record(9, ok, THERMO["structural"][1], el)
    assert ok


@pytest.mark.xfail(strict=True, reason="the ground-energy formula tends to about 0.3 W with a "
                   "negative broadening as eps1 -> 0 for any finite normalization (see README)")
def test_criterion_09_energy_limits():
    r = _thermo_runs()
    en = r["energy"]
    w = 1.0
    small = en[0.001]
    checks = {
        "E0->W/2": abs(small.E0 - 0.5 * w) < 1e-2,
        "broadening->0": abs(small.broadening) < 1e-2,
        "broadening(0.05)>0": en[0.05].broadening > 0,
    }
    ok, detail = _thermo_detail(checks)
    prev_ok, prev = THERMO.get("structural", (True, ""))
    record(9, prev_ok and ok,
           f"{prev}; {detail} (E0 {small.E0:.3f}, broadening {small.broadening:.3f} at eps 1e-3; "
           f"broadening {en[0.05].broadening:.3f} at 0.05)")
    assert ok


def test_criterion_10_ito_cross_check():
    t0 = time.perf_counter()
    cfg = ScenarioConfig(eps2=0.05, p2=TimeProfile.constant(1.0), t2=0.0, t_min=-5.0,
                         t_max=10.0, omega0_sq=TimeProfile.constant(0.0), seed=9)
    ens = simulate_ito_wavefunction(cfg, 20_000, 2.0, dt=1e-3)
    S = ito_moment_solution(ens.eps, [0.0, 2.0])[-1]
    X = np.stack([ens.xi1[-1].real, ens.xi1[-1].imag, ens.xi2[-1].real, ens.xi2[-1].imag])
    n = X.shape[1]
    z1 = np.abs(X.mean(axis=1)) / (X.std(axis=1, ddof=1) / math.sqrt(n))
    prod = X[:, None, :] * X[None, :, :]
    se = prod.std(axis=2, ddof=1) / math.sqrt(n)
    d = np.abs(prod.mean(axis=2) - S)
    z2 = np.where(se > 0, d / np.where(se > 0, se, 1), np.where(d < 1e-12, 0.0, np.inf))
    zmax = float(max(z1.max(), z2.max()))
    dts = np.array([0.02, 0.01, 0.005, 0.0025])
    res = np.array([ito_path_residual(cfg, 200, 2.0, dt, seed=1).mean() for dt in dts])
    slopes = np.diff(np.log(res)) / np.diff(np.log(dts))
    el = time.perf_counter() - t0
    ok = zmax < 3 and np.all((slopes > 0.8) & (slopes < 1.2)) and el < 120
    record(10, ok, f"moments max z = {zmax:.2f}; residual slopes "
                   f"{', '.join(f'{v:.3f}' for v in slopes)}", el)
    assert ok


def test_criterion_11_determinism(tmp_path):
    from stochqho import cli

    t0 = time.perf_counter()
    files = []
    for i, threads in enumerate((1, 3, 2)):
        out = tmp_path / f"run{i}"
        args = ["mc", "--config", config_path("force_noise.toml"), "--paths", "500",
                "--nmax", "4", "--out", str(out), "--threads", str(threads)]
        assert cli.main(args) == 0
        ens = simulate_z(load_config(config_path("general.toml")), 300, threads=threads,
                         block_size=97)
        u = simulate_u(load_config(config_path("frequency_window.toml")), 200, threads=threads)
        rho, _ = th.build_rho0(load_config(config_path("frequency_window.toml")), u,
                               np.linspace(-5, 5, 41))
        gen = brownian_generator(8.0, 201)
        fk = mc_functional(gen, FunctionalSpec(0.0, 1.0, V1=lambda X, xp: X[0] ** 2), (0.0,),
                           3000, dt=1e-2, seed=5, block_size=512)
        blob = (out / "mc_transitions.csv").read_bytes() + ens.states.tobytes() \
            + rho.values.tobytes() + np.float64(fk.mean).tobytes()
        files.append(blob)
    el = time.perf_counter() - t0
    ok = files[0] == files[1] == files[2]
    record(11, ok, "MC transitions CSV, SDE states, rho, FK estimate byte-identical across "
                   "1/2/3 workers", el)
    assert ok
