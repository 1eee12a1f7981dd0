"""Average transition probabilities W_nm = lim <|c_nm|^2> in each noise regime.

Regimes:
  eps1_zero          force noise only: Gaussian quadrature of |c_nm|^2 against P1
  eps2_zero_full     frequency noise only: sink equation on the (u1..u4) grid
  eps2_zero_reduced  frequency noise in a window: stationary + conjugate solutions
  general            both noises, constant coefficients
  mc                 direct Monte Carlo average of |c_nm|^2 (oracle)
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from . import fokker_planck as fp
from .classical import CharacteristicFrame, extract_asymptotics, solve_classical
from .scenario import ScenarioConfig
from .wavefunction import cnm_batch, generating_coefficients

REGIMES = ("eps1_zero", "eps2_zero_full", "eps2_zero_reduced", "general", "mc")
SINK_POWER = {(0, 0): 1, (0, 1): 1, (1, 0): 3, (1, 1): 3}
PLATEAU_TOL = 1e-4
PLATEAU_TAIL = 0.2
NEGATIVE_TOL = 1e-6


class PlateauNotReached(RuntimeError):
    pass


class NegativeProbability(ValueError):
    pass


class SigmaNotPositive(ValueError):
    pass


@dataclass
class TransitionTable:
    W: np.ndarray  # W[n, m]; NaN where the regime gives no value
    err: np.ndarray  # stderr (MC) or grid/quadrature error estimate
    regime: str
    scenario_hash: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        w = np.asarray(self.W, float)
        if np.any(w[np.isfinite(w)] < -NEGATIVE_TOL):
            raise NegativeProbability(f"W has entries below {-NEGATIVE_TOL:g}: min {np.nanmin(w):.3e}")

    def row_sums(self):
        return np.nansum(self.W, axis=1)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "m", "W", "stderr_or_grid_err", "regime", "scenario_hash"])
            for n in range(self.W.shape[0]):
                for m in range(self.W.shape[1]):
                    if np.isfinite(self.W[n, m]):
                        w.writerow([n, m, repr(float(self.W[n, m])), repr(float(self.err[n, m])),
                                    self.regime, self.scenario_hash])


def read_csv(path) -> TransitionTable:
    rows = list(csv.DictReader(open(path, newline="")))
    nm = max(max(int(r["n"]), int(r["m"])) for r in rows) + 1
    W = np.full((nm, nm), np.nan)
    E = np.full((nm, nm), np.nan)
    for r in rows:
        W[int(r["n"]), int(r["m"])] = float(r["W"])
        E[int(r["n"]), int(r["m"])] = float(r["stderr_or_grid_err"])
    return TransitionTable(W, E, rows[0]["regime"], rows[0]["scenario_hash"])


def plateau(times, values, tail=PLATEAU_TAIL, tol=PLATEAU_TOL, floor=1e-12):
    """Relative spread of ``values`` over the final ``tail`` of the time span.

    Returns (converged, spread).  ``values`` may carry trailing dimensions.
    """
    times = np.asarray(times, float)
    v = np.asarray(values, float)
    t0 = times[-1] - tail * (times[-1] - times[0])
    sel = v[times >= t0 - 1e-12]
    ref = np.maximum(np.abs(sel[-1]), floor)
    spread = float(np.max(np.abs(sel - sel[-1]) / ref)) if sel.shape[0] > 1 else 0.0
    return spread < tol, spread


# ---------------------------------------------------------------------------
# weights


def H_weights(u1, u2, u3, u4, omega_in, omega_out, xi0_abs):
    """H_nm(u) for n, m in {0, 1} at the out-frequency; dict keyed by (n, m)."""
    wi, wo = omega_in, omega_out
    u1, u2, u3, u4 = (np.asarray(v, float) for v in (u1, u2, u3, u4))
    K = wo + u4 - 1j * u3
    K2 = np.abs(K) ** 2
    expo = (0.5 * wo * (2 * wo * (u4 + wo) / K2 - 2) * u1 ** 2
            - (u4 + wo) / K2 * u2 ** 2 + 2 * wo * u3 / K2 * u1 * u2)
    h00 = 2 * np.sqrt(wi * wo) / (xi0_abs * np.sqrt(K2)) * np.exp(expo)
    h01 = 2 * wo / K2 * ((u2 - u1 * u3) ** 2 + u1 ** 2 * u4 ** 2) * h00
    h10 = 2 * wi / (xi0_abs ** 2 * K2) * (wo ** 2 * u1 ** 2 + u2 ** 2) * h00
    h11 = (4 * wi * wo / (xi0_abs ** 2 * K2 * K2)
           * np.abs(K - (wo * u1 - 1j * u2) * (u1 * u4 + 1j * (u2 - u1 * u3))) ** 2 * h00)
    return {(0, 0): h00, (0, 1): h01, (1, 0): h10, (1, 1): h11}


@dataclass
class ReducedWeights:
    values: dict  # (n, m) -> array of Hbar on the supplied points
    sigma_coeffs: tuple  # Sigma(x3) = c2 x3^2 + c1 x3 + c0
    mu1: float
    mu2: float
    rho: float
    nu: float
    beta: float
    delta: float

    def sigma(self, x3):
        c2, c1, c0 = self.sigma_coeffs
        x3 = np.asarray(x3, float)
        return c2 * x3 * x3 + c1 * x3 + c0


def sigma_coefficients(d, rho, delta, omega_in, omega_out):
    d1, d2, d3, d4 = d[:4]
    sr = math.sqrt(rho)
    cd, sd = math.cos(delta), math.sin(delta)
    pre = omega_in * omega_out / (1 - rho)
    c2 = (d1 * d1 + d2 * d2) * (1 + rho) - 2 * sr * ((d1 * d1 - d2 * d2) * cd + 2 * d1 * d2 * sd)
    c1 = 2 * (-(d2 * d4 + d1 * d3) * (1 + rho)
              + 2 * sr * ((d1 * d4 + d2 * d3) * sd + (d1 * d3 - d2 * d4) * cd))
    c0 = (d3 * d3 + d4 * d4) * (1 + rho) + 2 * sr * ((d4 * d4 - d3 * d3) * cd - 2 * d3 * d4 * sd)
    return pre * c2, pre * c1, pre * c0


def reduced_mu(d, nu, beta, omega_in):
    d1, d2, d3, d4, d5, d6 = d
    s = math.sqrt(2 * nu / omega_in)
    mu1 = -d5 + s * (d1 * math.cos(beta) + d2 * math.sin(beta))
    mu2 = -d6 + s * (d3 * math.cos(beta) + d4 * math.sin(beta))
    return mu1, mu2


def Hbar_weights(x1, x2, x3, omega_in, omega_out, xi0_abs, sigma, mu1, mu2):
    """Hbar_00 and Hbar_01 at (x1, x2, x3); ``sigma`` is Sigma(x3) there."""
    sigma = np.asarray(sigma, float)
    if np.any(sigma <= 0):
        raise SigmaNotPositive(f"Sigma(xi3) <= 0 (min {sigma.min():.3e})")
    x1, x2, x3 = (np.asarray(v, float) for v in (x1, x2, x3))
    a = omega_out * omega_in ** 2 / sigma
    h00 = (2 * math.sqrt(omega_in * omega_out) / (xi0_abs * np.sqrt(sigma))
           * np.exp(-a * (x3 * (x1 + mu1) - x2 - mu2) ** 2))
    h01 = 2 * a * (x2 - x1 * x3 - x3 * mu1 + mu2) ** 2 * h00
    return {(0, 0): h00, (0, 1): h01}


def h_weights(kind: str, params: dict) -> ReducedWeights | dict:
    """``kind="H_nm"``: params u1..u4, omega_in, omega_out, xi0_abs -> dict.

    ``kind="Hbar_nm"``: params x1, x2, x3, omega_in, omega_out, xi0_abs and
    either (d, rho, delta, nu, beta) or a ``solution`` plus ``t_e``.
    """
    if kind == "H_nm":
        p = params
        return H_weights(p["u1"], p["u2"], p["u3"], p["u4"], p["omega_in"], p["omega_out"],
                         p["xi0_abs"])
    if kind != "Hbar_nm":
        raise ValueError(f"unknown weight kind {kind!r}")
    p = dict(params)
    if "solution" in p:
        sol = p["solution"]
        asy = extract_asymptotics(sol)
        frame = CharacteristicFrame(sol, p["t_e"])
        p.update(d=frame.d, rho=asy.rho, delta=asy.delta, nu=asy.nu, beta=asy.beta)
    cs = sigma_coefficients(p["d"], p["rho"], p["delta"], p["omega_in"], p["omega_out"])
    mu1, mu2 = reduced_mu(p["d"], p["nu"], p["beta"], p["omega_in"])
    rw = ReducedWeights({}, cs, mu1, mu2, p["rho"], p["nu"], p["beta"], p["delta"])
    rw.values = Hbar_weights(p["x1"], p["x2"], p["x3"], p["omega_in"], p["omega_out"],
                             p["xi0_abs"], rw.sigma(p["x3"]), mu1, mu2)
    return rw


# ---------------------------------------------------------------------------
# eps1 = 0: Gaussian quadrature against P1


def _p1_rule(config, sol, t, order):
    mean, cov = fp.p1_covariance(config, sol, t) if t > config.t2 and config.eps2 > 0 else (
        fp.p1_moments(config, sol, t)[0], np.zeros((2, 2)))
    if not np.any(cov):
        return mean[None, :], np.ones(1)
    s, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    L = np.linalg.cholesky(cov + 1e-300 * np.eye(2))
    S1, S2 = np.meshgrid(s, s, indexing="ij")
    Z = np.stack([S1.ravel(), S2.ravel()])
    X = mean[:, None] + L @ Z
    return X.T, np.outer(w, w).ravel()


def _w_eps1_zero_at(config, sol, t, n_max, order):
    X, w = _p1_rule(config, sol, t, order)
    s = sol.state(t)
    gen = generating_coefficients(s["xi"], s["dxi"], X[:, 0], X[:, 1], s["sigma"], t,
                                  config.omega_in, config.omega_out)
    c = cnm_batch(gen, n_max)
    return np.einsum("p,pnm->nm", w, np.abs(c) ** 2)


def w_nm_eps1_zero(config: ScenarioConfig, n_max: int | None = None, order: int = 48,
                   n_times: int = 11, solution=None, require_plateau: bool = True) -> TransitionTable:
    """W_nm for force noise only, by Gauss-Hermite quadrature over P1.

    |c_nm|^2 is evaluated at ``n_times`` points in the last 20% of the window;
    the limit is accepted when the plateau criterion holds.  The error column
    is the difference between ``order`` and ``order // 2`` quadrature.
    """
    if config.eps1 != 0:
        raise ValueError("w_nm_eps1_zero requires eps1 = 0")
    n_max = config.n_max if n_max is None else n_max
    sol = solution or solve_classical(config)
    t_hi = config.t_max
    t_lo = t_hi - PLATEAU_TAIL * (config.t_max - config.t_min)
    ts = np.linspace(t_lo, t_hi, n_times)
    series = np.array([_w_eps1_zero_at(config, sol, t, n_max, order) for t in ts])
    ok, spread = plateau(ts, series, tail=1.0)
    if require_plateau and not ok:
        raise PlateauNotReached(f"relative change {spread:.2e} over the final window")
    W = series[-1]
    err = np.abs(W - _w_eps1_zero_at(config, sol, t_hi, n_max, max(order // 2, 2)))
    return TransitionTable(W, err, "eps1_zero", config.scenario_hash(),
                           {"plateau_spread": spread, "order": order, "t": t_hi})


# ---------------------------------------------------------------------------
# eps2 = 0: full sink-equation representation


def _grid_average(gf, H):
    return float(np.sum(gf.values * H) * gf.cell_volume)


def w_nm_eps2_zero_full(config: ScenarioConfig, n_max: int = 1, axes=None, t_end=None,
                        n_records: int = 6, solution=None, leak_check: bool = False,
                        require_plateau: bool = True, **kw) -> TransitionTable:
    """<|c_nm|^2>(t) = int H_nm Q_nm du with Q_nm from the sink equation.

    The sink equation is solved from t1 to ``t_end`` (default: end of the
    noise window, or t_max).  Once a window has closed under constant
    coefficients the averages are exact invariants, so no plateau is needed;
    solving on through the noise-free phase only lets the sink amplify
    central-difference outflow oscillations.  With ``leak_check`` the
    sink-free density is also evolved and its mass loss through the box is
    reported as the error estimate.
    """
    if config.eps2 != 0:
        raise ValueError("w_nm_eps2_zero_full requires eps2 = 0")
    if n_max > 1:
        raise ValueError("explicit weights exist for n, m <= 1 only")
    sol = solution or solve_classical(config)
    wo = config.omega_out
    if t_end is None:
        bps = [b for b in config.p1.breakpoints() if b > config.t1]
        t_end = max(bps) if bps else config.t_max
    closed = config.p1.kind == "window" and config.p1.t1 <= t_end \
        and config.omega0_sq.kind == "constant" and config.f0.kind == "constant"
    require_plateau = require_plateau and not closed
    t_rec = np.linspace(t_end - PLATEAU_TAIL * (t_end - config.t1), t_end, n_records)
    if axes is None:
        axes = fp.default_axes4(config, n=kw.pop("n", 64))
    xi0_abs = abs(sol.state(config.t1)["xi"])
    W = np.full((n_max + 1, n_max + 1), np.nan)
    err = np.zeros_like(W)
    meta = {"t_end": t_end, "plateau_spread": {}, "window_closed": closed}
    for p in sorted({SINK_POWER[(n, m)] for n in range(n_max + 1) for m in range(n_max + 1)}):
        r = fp.solve_fp4d(config, (config.t1, t_end), axes=axes, sink=p, record_times=t_rec,
                          solution=sol, **kw)
        Z = r.series[0].mesh()
        Hs = H_weights(*Z, config.omega_in, wo, xi0_abs)
        for (n, m), pp in SINK_POWER.items():
            if pp != p or n > n_max or m > n_max:
                continue
            vals = np.array([_grid_average(g, Hs[(n, m)]) for g in r.series])
            ok, spread = plateau(r.times, vals, tail=1.0)
            meta["plateau_spread"][(n, m)] = spread
            if require_plateau and not ok:
                raise PlateauNotReached(f"W_{n}{m}: relative change {spread:.2e}")
            W[n, m] = vals[-1]
        meta[f"min_value_p{p}"] = r.min_value
    if leak_check:
        r0 = fp.solve_fp4d(config, (config.t1, t_end), axes=axes, sink=0.0, solution=sol,
                           leak_tol=None, **kw)
        leak = abs(1 - r0.mass[-1] / r0.mass0)
        err[:] = leak * np.abs(W)
        meta["leak"] = leak
    return TransitionTable(W, err, "eps2_zero_full", config.scenario_hash(), meta)


# ---------------------------------------------------------------------------
# reduced (stationary) representation


def _window_end(config):
    if config.p1.kind != "window":
        raise ValueError("the reduced representation needs a window profile p1")
    return config.p1.t1


def _check_constant(config):
    for name in ("omega0_sq", "f0"):
        prof = getattr(config, name)
        if prof.kind != "constant":
            raise ValueError(f"{name} must be constant for the stationary representation")


def _composite_gl(f, a, b, panels, order=64):
    s, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        x = 0.5 * (hi - lo) * s + 0.5 * (hi + lo)
        total += 0.5 * (hi - lo) * np.dot(w, f(x))
    return total


@dataclass
class ReducedParts:
    q: fp.StationarySolution
    Y: fp.StationarySolution
    C: float
    weights: ReducedWeights
    integral: float
    tail: float


def _reduced_one(config, sol, p, nm, conj_axes, L, n, order):
    wi, wo = config.omega_in, config.omega_out
    t_e = _window_end(config)
    q = fp.solve_stationary("shortened", config.eps1, wo, p=p, eps2=config.eps2,
                            f0=float(config.f0.value), L=L, n=n)
    Y = fp.solve_conjugate("conjugate", config.eps1, wo, p=p, axes=conj_axes)
    s1 = sol.state(config.t1)
    phi = s1["dxi"] / s1["xi"]
    u0 = (s1["eta"], s1["deta"], phi.real, phi.imag)
    C = fp.normalization_constant(q, Y, u0, wo)
    xi0_abs = abs(s1["xi"])
    dense = q.meta["dense"]
    asy = extract_asymptotics(sol)
    frame = CharacteristicFrame(sol, t_e)
    base = {"x1": 0.0, "x2": 0.0, "omega_in": wi, "omega_out": wo, "xi0_abs": xi0_abs,
            "d": frame.d, "rho": asy.rho, "delta": asy.delta, "nu": asy.nu, "beta": asy.beta}

    def wts(x3):
        return h_weights("Hbar_nm", dict(base, x3=x3))

    rw = wts(np.zeros(1))

    def integrand(x3):
        return dense(x3)[0] * wts(x3).values[nm]

    integral = _composite_gl(integrand, -L, L, panels=int(2 * L), order=order)
    # algebraic tails beyond +-L: q ~ 1/|x|, Hbar ~ 1/|x|
    tail = float(sum(abs(integrand(np.array([e]))[0]) * L for e in (-L, L)))
    return ReducedParts(q, Y, C, rw, integral, tail)


def w_nm_eps2_zero_reduced(config: ScenarioConfig, pairs=((0, 0), (0, 1)), conj_axes=None,
                           L: float = 60.0, n: int = 4001, order: int = 64,
                           solution=None) -> TransitionTable:
    """W_nm = Omega_in^p C_nm int qbar_nm Hbar_nm over the shortened variables."""
    if config.eps2 != 0:
        raise ValueError("w_nm_eps2_zero_reduced requires eps2 = 0")
    _check_constant(config)
    sol = solution or solve_classical(config)
    nmax = max(max(pq) for pq in pairs)
    W = np.full((nmax + 1, nmax + 1), np.nan)
    err = np.full_like(W, np.nan)
    meta = {}
    for nm in pairs:
        if nm not in ((0, 0), (0, 1)):
            raise ValueError(f"no reduced weight for (n, m) = {nm}")
        p = SINK_POWER[nm]
        parts = _reduced_one(config, sol, p, nm, conj_axes, L, n, order)
        W[nm] = config.omega_in ** p * parts.C * parts.integral
        err[nm] = config.omega_in ** p * abs(parts.C) * parts.tail
        meta[nm] = {"C": parts.C, "integral": parts.integral, "q_residual": parts.q.residual,
                    "Y_residual": parts.Y.residual, "mu": (parts.weights.mu1, parts.weights.mu2)}
    return TransitionTable(W, err, "eps2_zero_reduced", config.scenario_hash(), meta)


# ---------------------------------------------------------------------------
# general case


def initial_weight(config: ScenarioConfig, Y: fp.StationarySolution, q, sol, conj_axes=None):
    """A = int R(z, t_>) C(z) dz with C(z) = Y(z) / int Y(., 0) q.

    C depends on (z3, z4) only.  When t2 <= t1 the (z3, z4) part of R is a
    delta at the deterministic value and A = C(u0); otherwise R is the
    frequency-noise density of (z3, z4) at t2, obtained on the grid.
    """
    wo = config.omega_out
    s1 = sol.state(config.t1)
    phi = s1["dxi"] / s1["xi"]
    u0 = (s1["eta"], s1["deta"], phi.real, phi.imag)
    C0 = fp.normalization_constant(q, Y, u0, wo)
    if config.t2 <= config.t1 or config.eps1 == 0:
        return C0
    a3, a4 = Y.q.axes
    axes = (fp.Axis.point(0.0), fp.Axis.point(0.0), a3, a4)
    r = fp.solve_fp4d(config, (config.t1, config.t2), axes=axes, solution=sol,
                      noise=(True, False), leak_tol=None)
    R = r.final.values[0, 0]
    scale = C0 / fp.point_value(Y, u0[2], u0[3])
    return float(np.sum(R * Y.q.values) * a3.h * a4.h * scale)


def w_nm_general(config: ScenarioConfig, pairs=((0, 0), (0, 1)), conj_axes=None,
                 stationary_axes=None, L: float = 60.0, n: int = 4001, order: int = 64,
                 solution=None) -> TransitionTable:
    """W_nm = Omega_in^p A_nm int qbar_nm Hbar_nm with both noises on.

    With eps2 > 0 the shortened stationary problem is three-dimensional and
    solved on ``stationary_axes``; solver failures propagate.
    """
    _check_constant(config)
    sol = solution or solve_classical(config)
    if config.eps1 == 0:
        return w_nm_eps1_zero(config, solution=sol)
    if config.eps2 == 0 and float(config.f0.value) == 0.0:
        # R collapses to a delta at u0 in (z3, z4) and C ignores (z1, z2): A = C(u0)
        base = w_nm_eps2_zero_reduced(config, pairs, conj_axes, L, n, order, sol)
        return TransitionTable(base.W, base.err, "general", base.scenario_hash, base.meta)
    if stationary_axes is None:
        w = config.omega_out
        stationary_axes = fp.make_axes((-6.0, 6.0, 33), (-6 * w, 6 * w, 33), (-8 * w, 8 * w, 65))
    fp.solve_stationary("shortened_general", config.eps1, config.omega_out, 1, config.eps2,
                        float(config.f0.value), axes=stationary_axes)
    raise fp.StationarySolveError("stationary solution found but the 3D reduced quadrature "
                                  "is not available for eps2 > 0")


# ---------------------------------------------------------------------------
# Monte Carlo


def w_nm_mc(config: ScenarioConfig, n_paths: int, n_max: int | None = None, t_end=None,
            solution=None, **kw) -> TransitionTable:
    from .sde import simulate_z, transition_estimate

    n_max = config.n_max if n_max is None else n_max
    sol = solution or solve_classical(config)
    ens = simulate_z(config, n_paths, t_end=t_end, solution=sol, **kw)
    est = transition_estimate(ens, n_max)
    return TransitionTable(est.mean, est.stderr, "mc", config.scenario_hash(),
                           {"n": est.n, "flagged": est.flagged, "t": float(ens.times[-1])})
