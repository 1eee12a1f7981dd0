"""Monte Carlo ensembles for the stochastic trajectory systems.

State per path: (x1, x2) = (eta, eta') and (u3, u4) = (Re, Im) of xi'/xi,
plus the running integrals I3 = int u3, I4 = int u4 (so that
xi(t) = xi0(t_start) exp(I3 + i I4)) and the action sigma.

    dx1 = x2 dt
    dx2 = (F0 - Omega0^2 x1) dt - a1 x1 dW1 + a2 dW2
    du3 = (u4^2 - u3^2 - Omega0^2) dt - a1 dW1
    du4 = -2 u3 u4 dt

with a_i = sqrt(2 eps_i p_i(t)) Theta(t - t_i).  Every diffusion coefficient
depends only on noise-free coordinates, so Ito and Stratonovich readings
coincide and the stochastic Heun scheme is consistent with either.

Noise layout: trajectories are cut into fixed blocks of ``block_size`` paths.
Block b draws from NoiseStream(seed, stream_base + b) two normals per path per
step in a fixed order, so results do not depend on the worker count and the
eps1 -> 0 / eps2 -> 0 limits reuse identical noise.
"""
from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, use_numba
from .classical import ClassicalSolution, solve_classical
from .rng import NoiseStream
from .scenario import ScenarioConfig
from .wavefunction import cnm_batch, generating_coefficients

STATE_FIELDS = ("x1", "x2", "u3", "u4", "i3", "i4", "sigma")
BLOCK_SIZE = 2048
CHUNK_STEPS = 256
SUBSTEP_FACTOR = 10.0  # sub-step when |u| > SUBSTEP_FACTOR * omega_in
HARD_FACTOR = 1e4  # flag when |u3| > HARD_FACTOR * omega_in
MAX_SUBSTEPS = 4096
FLAG_LIMIT = 0.01

STREAM_Z = 0
STREAM_ITO = 1 << 32
STREAM_KAC = 2 << 32


class FlaggedFractionError(RuntimeError):
    pass


def default_dt(config: ScenarioConfig):
    """T/200 for the faster of the two asymptotic frequencies."""
    return 2 * np.pi / max(config.omega_in, config.omega_out) / 200


def default_threads():
    return int(os.environ.get("STOCHQHO_THREADS", "1"))


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def _z_chunk_nb(st, flags, om2, f0, a1m, a2m, k0, nsteps, dW, dt, heun, thr, hard, maxsub):
    npath = st.shape[1]
    for p in range(npath):
        if flags[p]:
            continue
        X1 = st[0, p]
        X2 = st[1, p]
        U3 = st[2, p]
        U4 = st[3, p]
        I3 = st[4, p]
        I4 = st[5, p]
        S = st[6, p]
        bad = False
        for kk in range(nsteps):
            k = k0 + kk
            w1 = dW[kk, 0, p]
            w2 = dW[kk, 1, p]
            big = max(abs(U3), abs(U4))
            m = 1
            if big > thr:
                m = min(max(int(math.ceil(big * dt / 0.05)), 1), maxsub)
            h = dt / m
            v1 = w1 / m
            v2 = w2 / m
            A1 = a1m[k]
            A2 = a2m[k]
            for j in range(m):
                s0 = j / m
                s1 = (j + 1) / m
                oa = om2[k] + (om2[k + 1] - om2[k]) * s0
                ob = om2[k] + (om2[k + 1] - om2[k]) * s1
                fa = f0[k] + (f0[k + 1] - f0[k]) * s0
                fb = f0[k] + (f0[k + 1] - f0[k]) * s1
                d1 = X2
                d2 = fa - oa * X1
                d3 = U4 * U4 - U3 * U3 - oa
                d4 = -2.0 * U3 * U4
                la = 0.5 * X2 * X2 - 0.5 * oa * X1 * X1 + fa * X1
                if heun:
                    P1 = X1 + d1 * h
                    P2 = X2 + d2 * h - A1 * X1 * v1 + A2 * v2
                    P3 = U3 + d3 * h - A1 * v1
                    P4 = U4 + d4 * h
                    e1 = P2
                    e2 = fb - ob * P1
                    e3 = P4 * P4 - P3 * P3 - ob
                    e4 = -2.0 * P3 * P4
                    N1 = X1 + 0.5 * (d1 + e1) * h
                    N2 = X2 + 0.5 * (d2 + e2) * h - 0.5 * A1 * (X1 + P1) * v1 + A2 * v2
                    N3 = U3 + 0.5 * (d3 + e3) * h - A1 * v1
                    N4 = U4 + 0.5 * (d4 + e4) * h
                    lb = 0.5 * N2 * N2 - 0.5 * ob * N1 * N1 + fb * N1
                    S += 0.5 * (la + lb) * h - 0.25 * A1 * (X1 * X1 + N1 * N1) * v1 \
                        + 0.5 * A2 * (X1 + N1) * v2
                    I3 += 0.5 * (U3 + N3) * h
                    I4 += 0.5 * (U4 + N4) * h
                else:
                    N1 = X1 + d1 * h
                    N2 = X2 + d2 * h - A1 * X1 * v1 + A2 * v2
                    N3 = U3 + d3 * h - A1 * v1
                    N4 = U4 + d4 * h
                    S += la * h - 0.5 * A1 * X1 * X1 * v1 + A2 * X1 * v2
                    I3 += U3 * h
                    I4 += U4 * h
                X1 = N1
                X2 = N2
                U3 = N3
                U4 = N4
                if not (abs(U3) <= hard and abs(U4) <= hard and abs(X1) < 1e300
                        and abs(X2) < 1e300):
                    bad = True
                    break
            if bad:
                break
        st[0, p] = X1
        st[1, p] = X2
        st[2, p] = U3
        st[3, p] = U4
        st[4, p] = I3
        st[5, p] = I4
        st[6, p] = S
        if bad:
            flags[p] = True


def _z_chunk_np(st, flags, om2, f0, a1m, a2m, k0, nsteps, dW, dt, heun, thr, hard, maxsub):
    live = ~flags
    X1, X2, U3, U4, I3, I4, S = (st[i].copy() for i in range(7))
    for kk in range(nsteps):
        k = k0 + kk
        big = np.maximum(np.abs(U3), np.abs(U4))
        m = np.where(big > thr, np.clip(np.ceil(big * dt / 0.05), 1, maxsub), 1).astype(np.int64)
        m = np.where(live, m, 0)
        h = dt / np.maximum(m, 1)
        v1 = dW[kk, 0] / np.maximum(m, 1)
        v2 = dW[kk, 1] / np.maximum(m, 1)
        A1, A2 = a1m[k], a2m[k]
        for j in range(int(m.max(initial=0))):
            act = (j < m) & live
            if not act.any():
                break
            s0 = j / np.maximum(m, 1)
            s1 = (j + 1) / np.maximum(m, 1)
            oa = om2[k] + (om2[k + 1] - om2[k]) * s0
            ob = om2[k] + (om2[k + 1] - om2[k]) * s1
            fa = f0[k] + (f0[k + 1] - f0[k]) * s0
            fb = f0[k] + (f0[k + 1] - f0[k]) * s1
            with np.errstate(all="ignore"):
                d1 = X2
                d2 = fa - oa * X1
                d3 = U4 * U4 - U3 * U3 - oa
                d4 = -2.0 * U3 * U4
                la = 0.5 * X2 * X2 - 0.5 * oa * X1 * X1 + fa * X1
                if heun:
                    P1 = X1 + d1 * h
                    P2 = X2 + d2 * h - A1 * X1 * v1 + A2 * v2
                    P3 = U3 + d3 * h - A1 * v1
                    P4 = U4 + d4 * h
                    e1 = P2
                    e2 = fb - ob * P1
                    e3 = P4 * P4 - P3 * P3 - ob
                    e4 = -2.0 * P3 * P4
                    N1 = X1 + 0.5 * (d1 + e1) * h
                    N2 = X2 + 0.5 * (d2 + e2) * h - 0.5 * A1 * (X1 + P1) * v1 + A2 * v2
                    N3 = U3 + 0.5 * (d3 + e3) * h - A1 * v1
                    N4 = U4 + 0.5 * (d4 + e4) * h
                    lb = 0.5 * N2 * N2 - 0.5 * ob * N1 * N1 + fb * N1
                    dS = 0.5 * (la + lb) * h - 0.25 * A1 * (X1 * X1 + N1 * N1) * v1 \
                        + 0.5 * A2 * (X1 + N1) * v2
                    d3i = 0.5 * (U3 + N3) * h
                    d4i = 0.5 * (U4 + N4) * h
                else:
                    N1 = X1 + d1 * h
                    N2 = X2 + d2 * h - A1 * X1 * v1 + A2 * v2
                    N3 = U3 + d3 * h - A1 * v1
                    N4 = U4 + d4 * h
                    dS = la * h - 0.5 * A1 * X1 * X1 * v1 + A2 * X1 * v2
                    d3i = U3 * h
                    d4i = U4 * h
            X1 = np.where(act, N1, X1)
            X2 = np.where(act, N2, X2)
            U3 = np.where(act, N3, U3)
            U4 = np.where(act, N4, U4)
            S = np.where(act, S + dS, S)
            I3 = np.where(act, I3 + d3i, I3)
            I4 = np.where(act, I4 + d4i, I4)
            with np.errstate(invalid="ignore"):
                ok = ((np.abs(U3) <= hard) & (np.abs(U4) <= hard)
                      & (np.abs(X1) < 1e300) & (np.abs(X2) < 1e300))
            newly = act & ~ok
            if newly.any():
                live = live & ~newly
                flags |= newly
    for i, a in enumerate((X1, X2, U3, U4, I3, I4, S)):
        st[i] = a


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class TrajectoryEnsemble:
    """Final (and optionally intermediate) states of N trajectories."""

    t_start: float
    times: np.ndarray  # recorded times; last entry is the final time
    states: np.ndarray  # (n_times, 7, N)
    flags: np.ndarray  # (N,) bool
    dt: float
    seed: int
    scheme: str
    xi_start: complex
    gamma_start: float
    sigma_start: float
    omega_in: float
    omega_out: float
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.states.shape[2]

    def snapshot(self, index=-1):
        return dict(zip(STATE_FIELDS, self.states[index]))

    def xi(self, index=-1):
        s = self.states[index]
        xi = self.xi_start * np.exp(s[4] + 1j * s[5])
        return xi, (s[2] + 1j * s[3]) * xi

    def flagged_fraction(self):
        return float(np.mean(self.flags)) if self.flags.size else 0.0

    def subset(self, mask):
        return TrajectoryEnsemble(self.t_start, self.times, self.states[:, :, mask],
                                  self.flags[mask], self.dt, self.seed, self.scheme,
                                  self.xi_start, self.gamma_start, self.sigma_start,
                                  self.omega_in, self.omega_out, dict(self.meta))


def _time_grid(t_start, t_end, dt):
    span = t_end - t_start
    if span < 0:
        raise ValueError("t_end precedes t_start")
    n = max(int(math.ceil(span / dt - 1e-9)), 1) if span > 0 else 0
    h = span / n if n else dt
    return n, h


def _run_block(b, n_block, state0, coeffs, n, h, seed, stream_base, heun, thr, hard,
               record_steps, antithetic):
    om2, f0, a1m, a2m = coeffs
    st = np.repeat(np.asarray(state0, float)[:, None], n_block, axis=1)
    st = np.ascontiguousarray(st)
    flags = np.zeros(n_block, dtype=np.bool_)
    ns = NoiseStream(seed, stream_base + b, h)
    out = []
    kernel = _z_chunk_nb if use_numba() else _z_chunk_np
    bounds = sorted(set(list(range(0, n, CHUNK_STEPS)) + list(record_steps) + [n]))
    half = (n_block + 1) // 2
    for k0, k1 in zip(bounds[:-1], bounds[1:]):
        if antithetic:
            z = ns.increments((k1 - k0, 2, half))
            dW = np.concatenate([z, -z], axis=2)[:, :, :n_block]
        else:
            dW = ns.increments((k1 - k0, 2, n_block))
        kernel(st, flags, om2, f0, a1m, a2m, k0, k1 - k0, np.ascontiguousarray(dW), h,
               heun, thr, hard, MAX_SUBSTEPS)
        if k1 in record_steps:
            out.append(st.copy())
    if n == 0 or not record_steps or record_steps[-1] != n:
        out.append(st.copy())
    return np.stack(out), flags


def simulate(config: ScenarioConfig, n_paths: int, t_start: float, t_end: float | None = None,
             dt: float | None = None, scheme: str = "heun", noise: tuple = (True, True),
             solution: ClassicalSolution | None = None, seed: int | None = None,
             record_times=(), threads: int | None = None, block_size: int = BLOCK_SIZE,
             stream_base: int = STREAM_Z, antithetic: bool = False) -> TrajectoryEnsemble:
    """Integrate the (eta, eta', u3, u4) system from ``t_start`` to ``t_end``.

    ``noise`` switches the frequency / force noise on or off independently of
    the config (used for the reduced systems).  The initial state is the
    deterministic trajectory at ``t_start``.
    """
    if scheme not in ("heun", "em"):
        raise ValueError("scheme must be 'heun' or 'em'")
    sol = solution or solve_classical(config)
    t_end = config.t_max if t_end is None else t_end
    dt = default_dt(config) if dt is None else dt
    seed = config.seed if seed is None else seed
    n, h = _time_grid(t_start, t_end, dt)
    tk = t_start + h * np.arange(n + 1)
    tk[-1] = t_end
    tm = tk[:-1] + 0.5 * h
    om2 = np.ascontiguousarray(config.omega_sq(tk), float)
    f0 = np.ascontiguousarray(config.force(tk), float)
    a1m = np.ascontiguousarray(config.noise_amp1(tm) if noise[0] else np.zeros(n), float)
    a2m = np.ascontiguousarray(config.noise_amp2(tm) if noise[1] else np.zeros(n), float)
    if n == 0:
        a1m = a2m = np.zeros(1)
    s = sol.state(t_start)
    phi = s["dxi"] / s["xi"]
    state0 = [s["eta"], s["deta"], phi.real, phi.imag, 0.0, 0.0, 0.0]
    rec = sorted({int(round((t - t_start) / h)) for t in record_times if t_start <= t <= t_end})
    rec = [r for r in rec if 0 < r < n] + [n] if n else []
    nblocks = (n_paths + block_size - 1) // block_size
    sizes = [min(block_size, n_paths - b * block_size) for b in range(nblocks)]
    thr = SUBSTEP_FACTOR * config.omega_in
    hard = HARD_FACTOR * config.omega_in
    args = [(b, sizes[b], state0, (om2, f0, a1m, a2m), n, h, seed, stream_base,
             scheme == "heun", thr, hard, rec, antithetic) for b in range(nblocks)]
    threads = threads or default_threads()
    if threads > 1 and nblocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda a: _run_block(*a), args))
    else:
        results = [_run_block(*a) for a in args]
    states = np.concatenate([r[0] for r in results], axis=2)
    flags = np.concatenate([r[1] for r in results])
    times = np.array([t_start + r * h for r in rec[:-1]] + [t_end]) if n else np.array([t_end])
    return TrajectoryEnsemble(t_start, times, states, flags, h, seed, scheme, complex(s["xi"]),
                              float(s["gamma"]), float(s["sigma"]), config.omega_in,
                              config.omega_out,
                              {"n_steps": n, "block_size": block_size, "noise": noise})


def simulate_eta(config, n_paths, **kw):
    """Force-noise-only system from t2 (frequency noise switched off)."""
    kw.setdefault("t_start", config.t2)
    return simulate(config, n_paths, noise=(False, True), **kw)


def simulate_u(config, n_paths, **kw):
    """Frequency-noise-only system from t1 (force noise switched off)."""
    kw.setdefault("t_start", config.t1)
    return simulate(config, n_paths, noise=(True, False), **kw)


def simulate_z(config, n_paths, **kw):
    """Both noises, from min(t1, t2); before each switch-on time the
    corresponding amplitude is zero, so the reduced dynamics runs there."""
    kw.setdefault("t_start", min(config.t1, config.t2))
    return simulate(config, n_paths, noise=(True, True), **kw)


# ---------------------------------------------------------------------------
# estimators


@dataclass
class Estimate:
    mean: np.ndarray
    stderr: np.ndarray
    n: int
    flagged: float = 0.0


def mc_average(values, flags=None, max_flagged: float = FLAG_LIMIT) -> Estimate:
    """Sample mean and stderr over unflagged trajectories (axis 0)."""
    values = np.asarray(values)
    if flags is None:
        flags = np.zeros(values.shape[0], bool)
    frac = float(np.mean(flags)) if flags.size else 0.0
    if frac > max_flagged:
        raise FlaggedFractionError(
            f"{frac:.2%} of trajectories flagged (limit {max_flagged:.0%})")
    v = values[~flags]
    n = v.shape[0]
    mean = v.mean(axis=0)
    err = v.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return Estimate(mean, err, n, frac)


def cnm_paths(ens: TrajectoryEnsemble, n_max: int, index=-1, sl=slice(None)):
    xi, dxi = ens.xi(index)
    s = ens.states[index]
    t = ens.times[index]
    gen = generating_coefficients(xi[sl], dxi[sl], s[0][sl], s[1][sl],
                                  ens.sigma_start + s[6][sl], t, ens.omega_in, ens.omega_out)
    return cnm_batch(gen, n_max)


def transition_estimate(ens: TrajectoryEnsemble, n_max: int, index=-1,
                        chunk: int = 4096, max_flagged: float = FLAG_LIMIT) -> Estimate:
    """W[n, m] = mean |c_nm|^2 with stderr, accumulated chunkwise in path order."""
    frac = ens.flagged_fraction()
    if frac > max_flagged:
        raise FlaggedFractionError(
            f"{frac:.2%} of trajectories flagged (limit {max_flagged:.0%})")
    keep = np.nonzero(~ens.flags)[0]
    # chunkwise mean / M2 merged pairwise (no s2 - mean^2 cancellation)
    mean = np.zeros((n_max + 1, n_max + 1))
    m2 = np.zeros_like(mean)
    n = 0
    for a in range(0, keep.size, chunk):
        idx = keep[a:a + chunk]
        p = np.abs(cnm_paths(ens, n_max, index, idx)) ** 2
        nb = p.shape[0]
        dev = p - p[0]  # shifted: identical paths give exactly zero spread
        mb = p[0] + dev.mean(axis=0)
        m2b = ((dev - dev.mean(axis=0)) ** 2).sum(axis=0)
        d = mb - mean if n else 0.0
        tot = n + nb
        mean = mean + d * (nb / tot) if n else mb
        m2 = m2 + m2b + d * d * (n * nb / tot)
        n = tot
    var = m2 / max(n - 1, 1)
    return Estimate(mean, np.sqrt(var / n), n, frac)


# ---------------------------------------------------------------------------
# Ito substitution system (force noise only, Omega0 = F0 = 0)


@dataclass
class ItoEnsemble:
    t: np.ndarray
    xi1: np.ndarray  # (n_times, N) complex
    xi2: np.ndarray
    xi3: np.ndarray
    dW: np.ndarray | None  # (n_steps, N) Brownian increments when kept
    eps: float
    dt: float


def ito_phi_coefficients(eps, t, a0=1.0 + 0j):
    """phi(y, t) = exp(-a y^2/2 + b) solving i phi_t = -phi_yy/2 + i eps y^2 phi.

    a' = -i a^2 - 2 eps,  b' = -i a / 2, with a(t0) = a0, b(t0) = log((Re a0/pi)^{1/4}).
    """
    from scipy.integrate import solve_ivp

    t = np.atleast_1d(np.asarray(t, float))

    def rhs(_, y):
        a = y[0] + 1j * y[1]
        da = -1j * a * a - 2 * eps
        db = -0.5j * a
        return [da.real, da.imag, db.real, db.imag]

    b0 = 0.25 * np.log(a0.real / np.pi)
    if t.size == 1:
        return np.array([a0]), np.array([b0 + 0j])
    sol = solve_ivp(rhs, (t[0], t[-1]), [a0.real, a0.imag, b0, 0.0], t_eval=t,
                    rtol=1e-12, atol=1e-14, method="DOP853")
    return sol.y[0] + 1j * sol.y[1], sol.y[2] + 1j * sol.y[3]


def simulate_ito_wavefunction(config: ScenarioConfig, n_paths: int, t_end: float,
                              dt: float | None = None, seed: int | None = None,
                              keep_increments: bool = False, record_every: int = 0,
                              stream_base: int = STREAM_ITO) -> ItoEnsemble:
    """Euler-Maruyama (Ito) integration of

        dxi1 = -2 i eps xi2 dt + sqrt(2 eps) dW
        dxi2 = xi1 dt
        dxi3 = (xi1^2/2 - i eps xi2^2) dt + sqrt(2 eps) xi2 dW

    from xi = 0 at t2, with eps = eps2 p2 (p2 must be constant on the span).
    """
    if config.eps1 != 0:
        raise ValueError("Ito substitution requires eps1 = 0")
    dt = default_dt(config) if dt is None else dt
    seed = config.seed if seed is None else seed
    t0 = config.t2
    n, h = _time_grid(t0, t_end, dt)
    tm = t0 + h * (np.arange(n) + 0.5)
    p = np.asarray(config.p2(tm)) if n else np.zeros(0)
    if n and np.ptp(p) > 0:
        raise ValueError("Ito substitution path needs a constant p2 on the span")
    eps = config.eps2 * (float(p[0]) if n else 0.0)
    amp = math.sqrt(2 * eps)
    ns = NoiseStream(seed, stream_base, h)
    x1 = np.zeros(n_paths, complex)
    x2 = np.zeros(n_paths, complex)
    x3 = np.zeros(n_paths, complex)
    rec_t, r1, r2, r3 = [t0], [x1.copy()], [x2.copy()], [x3.copy()]
    kept = np.empty((n, n_paths)) if keep_increments else None
    for k in range(n):
        dW = ns.increments(n_paths)
        if kept is not None:
            kept[k] = dW
        n1 = x1 - 2j * eps * x2 * h + amp * dW
        n2 = x2 + x1 * h
        n3 = x3 + (0.5 * x1 * x1 - 1j * eps * x2 * x2) * h + amp * x2 * dW
        x1, x2, x3 = n1, n2, n3
        if (record_every and (k + 1) % record_every == 0) or k == n - 1:
            rec_t.append(t0 + (k + 1) * h)
            r1.append(x1.copy())
            r2.append(x2.copy())
            r3.append(x3.copy())
    return ItoEnsemble(np.array(rec_t), np.array(r1), np.array(r2), np.array(r3), kept, eps, h)


def ito_moment_solution(eps: float, t):
    """Exact mean/covariance of (Re xi1, Im xi1, Re xi2, Im xi2) from the
    Fokker-Planck equation of the linear Ito system (Gaussian law, zero mean)."""
    from scipy.integrate import solve_ivp

    A = np.array([[0, 0, 0, 2 * eps],
                  [0, 0, -2 * eps, 0],
                  [1, 0, 0, 0],
                  [0, 1, 0, 0]], float)
    bb = np.zeros((4, 4))
    bb[0, 0] = 2 * eps
    t = np.atleast_1d(np.asarray(t, float))

    def rhs(_, y):
        S = y.reshape(4, 4)
        return (A @ S + S @ A.T + bb).ravel()

    sol = solve_ivp(rhs, (t[0], t[-1]), np.zeros(16), t_eval=t, rtol=1e-11, atol=1e-14)
    return sol.y.T.reshape(-1, 4, 4)


def ito_psi(ens: ItoEnsemble, k: int, x, a, b):
    """Psi on ``x`` for record index ``k`` given phi coefficients (a, b) at that time."""
    x = np.asarray(x, float)
    x1 = ens.xi1[k][:, None]
    x2 = ens.xi2[k][:, None]
    x3 = ens.xi3[k][:, None]
    y = x[None, :] - x2
    return np.exp(1j * (x1 * y + x3) - 0.5 * a * y * y + b)


def _exact_ito_step(p, q, S, F, eps, h, sub):
    """RK4 on p' = F - 2 i eps q, q' = p, S' = p^2/2 + F q - i eps q^2 (F constant)."""
    k = h / sub

    def f(p, q):
        return F - 2j * eps * q, p, 0.5 * p * p + F * q - 1j * eps * q * q

    for _ in range(sub):
        a1 = f(p, q)
        a2 = f(p + 0.5 * k * a1[0], q + 0.5 * k * a1[1])
        a3 = f(p + 0.5 * k * a2[0], q + 0.5 * k * a2[1])
        a4 = f(p + k * a3[0], q + k * a3[1])
        p, q, S = (p + k / 6 * (a1[0] + 2 * a2[0] + 2 * a3[0] + a4[0]),
                   q + k / 6 * (a1[1] + 2 * a2[1] + 2 * a3[1] + a4[1]),
                   S + k / 6 * (a1[2] + 2 * a2[2] + 2 * a3[2] + a4[2]))
    return p, q, S


def ito_path_residual(config: ScenarioConfig, n_paths: int, t_end: float, dt: float,
                      seed: int | None = None, x=None, sub: int = 8):
    """Per-path relative L2 distance between Psi built from the simulated xi's
    and the exact solution of the Ito Schrodinger equation driven by the same
    increments (force amp dW_k / h held constant on each step).

    With the Ito correction written out, i Psi_t = -Psi_xx/2 - F x Psi +
    i eps x^2 Psi keeps the Gaussian form, so the reference is a small ODE per
    path.  The distance is O(dt).
    """
    ens = simulate_ito_wavefunction(config, n_paths, t_end, dt=dt, seed=seed,
                                    keep_increments=True)
    w = config.omega_in
    x = np.linspace(-8 / math.sqrt(w), 8 / math.sqrt(w), 801) if x is None else np.asarray(x)
    t0, t1 = float(ens.t[0]), float(ens.t[-1])
    a, b = ito_phi_coefficients(ens.eps, [t0, t1], a0=w + 0j)
    psi = ito_psi(ens, -1, x, a[-1], b[-1])
    amp = math.sqrt(2 * ens.eps)
    p = np.zeros(n_paths, complex)
    q = np.zeros(n_paths, complex)
    S = np.zeros(n_paths, complex)
    for dW in ens.dW:
        p, q, S = _exact_ito_step(p, q, S, amp * dW / ens.dt, ens.eps, ens.dt, sub)
    y = x[None, :] - q[:, None]
    ref = np.exp(1j * (p[:, None] * y + S[:, None]) - 0.5 * a[-1] * y * y + b[-1])
    num = np.sqrt(np.sum(np.abs(psi - ref) ** 2, axis=1))
    return num / np.sqrt(np.sum(np.abs(ref) ** 2, axis=1))


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"SQHOENS1"
_VERSION = 1
_HEADER = struct.Struct("<8sIQdId")


def save_checkpoint(path, ens: TrajectoryEnsemble, index=-1):
    """Flat binary: header (magic, version, N, dt, state dim, t) then float64
    rows of (x1, x2, u3, u4, i3, i4, sigma, flag)."""
    s = ens.states[index]
    data = np.vstack([s, ens.flags[None].astype(float)]).T.astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, data.shape[0], ens.dt, data.shape[1],
                              float(ens.times[index])))
        fh.write(data.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic, ver, n, dt, dim, t = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC or ver != _VERSION:
            raise ValueError("not an ensemble checkpoint")
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(n, dim)
    return {"t": t, "dt": dt, "states": data[:, :7].T.copy(), "flags": data[:, 7] > 0}
