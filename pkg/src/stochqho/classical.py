"""Deterministic classical trajectories, asymptotic constants, characteristics.

xi0 solves  xi'' + Omega0^2(t) xi = 0,  xi0 ~ exp(i Omega_in t) at t_min;
eta0 solves eta'' + Omega0^2(t) eta = F0(t) from rest; sigma is the action
integral of 1/2 eta'^2 - 1/2 Omega0^2 eta^2 + F0 eta.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .scenario import ScenarioConfig

RTOL = 1e-10
ATOL = 1e-12


class IntegrationError(RuntimeError):
    pass


class AsymptoticRegionNotReached(RuntimeError):
    pass


class SingularCharacteristics(ZeroDivisionError):
    pass


def _segments(config: ScenarioConfig):
    edges = [config.t_min, *config.breakpoints(), config.t_max]
    return list(zip(edges[:-1], edges[1:]))


def _integrate(rhs, y0, config, rtol, atol):
    """Integrate across breakpoints; returns a list of (t0, t1, OdeSolution)."""
    pieces = []
    y = np.asarray(y0, float)
    for a, b in _segments(config):
        sol = solve_ivp(rhs, (a, b), y, method="DOP853", rtol=rtol, atol=atol,
                        dense_output=True)
        if not sol.success:
            raise IntegrationError(sol.message)
        pieces.append((a, b, sol.sol))
        y = sol.y[:, -1]
    return pieces


def _evaluate(pieces, t):
    t = np.atleast_1d(np.asarray(t, float))
    out = None
    for i, (a, b, s) in enumerate(pieces):
        last = i == len(pieces) - 1
        m = (t >= a) & ((t < b) | (last & (t <= b + 1e-9 * max(1.0, abs(b)))))
        if i == 0:
            m |= t < a
        if np.any(m):
            val = s(t[m])
            if out is None:
                out = np.empty((val.shape[0], t.size))
            out[:, m] = val
    return out


@dataclass
class XiTrack:
    pieces: list
    omega_in: float

    def __call__(self, t):
        """Rows: Re xi, Im xi, Re xi', Im xi', gamma."""
        return _evaluate(self.pieces, t)


@dataclass
class EtaTrack:
    pieces: list

    def __call__(self, t):
        """Rows: eta, eta', sigma."""
        return _evaluate(self.pieces, t)


def solve_xi0(config: ScenarioConfig, rtol=RTOL, atol=ATOL) -> XiTrack:
    w2 = config.omega_sq
    wi = config.omega_in

    def rhs(t, y):
        om2 = w2(t)
        r2 = y[0] * y[0] + y[1] * y[1]
        return [y[2], y[3], -om2 * y[0], -om2 * y[1], wi / r2]

    t0 = config.t_min
    y0 = [np.cos(wi * t0), np.sin(wi * t0), -wi * np.sin(wi * t0), wi * np.cos(wi * t0), wi * t0]
    return XiTrack(_integrate(rhs, y0, config, rtol, atol), wi)


def solve_eta0(config: ScenarioConfig, rtol=RTOL, atol=ATOL) -> EtaTrack:
    w2 = config.omega_sq
    f = config.force

    def rhs(t, y):
        om2 = w2(t)
        ft = f(t)
        return [y[1], ft - om2 * y[0], 0.5 * y[1] ** 2 - 0.5 * om2 * y[0] ** 2 + ft * y[0]]

    return EtaTrack(_integrate(rhs, [0.0, 0.0, 0.0], config, rtol, atol))


@dataclass
class ClassicalSolution:
    """Sampled deterministic trajectories plus dense interpolants."""

    t: np.ndarray
    xi01: np.ndarray
    xi02: np.ndarray
    dxi01: np.ndarray
    dxi02: np.ndarray
    eta0: np.ndarray
    deta0: np.ndarray
    sigma: np.ndarray
    gamma0: np.ndarray
    omega_in: float
    omega_out: float
    xi_track: XiTrack
    eta_track: EtaTrack
    config: ScenarioConfig

    @property
    def xi(self):
        return self.xi01 + 1j * self.xi02

    @property
    def dxi(self):
        return self.dxi01 + 1j * self.dxi02

    @property
    def r0(self):
        return np.abs(self.xi)

    def wronskian(self):
        return np.imag(np.conj(self.xi) * self.dxi)

    def state(self, t):
        """Dense evaluation: dict of xi, dxi, eta, deta, sigma, gamma at ``t``."""
        x = self.xi_track(t)
        e = self.eta_track(t)
        scalar = np.ndim(t) == 0
        pick = (lambda a: a[0]) if scalar else (lambda a: a)
        return {
            "xi": pick(x[0] + 1j * x[1]),
            "dxi": pick(x[2] + 1j * x[3]),
            "gamma": pick(x[4]),
            "eta": pick(e[0]),
            "deta": pick(e[1]),
            "sigma": pick(e[2]),
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "xi01", "xi02", "dxi01", "dxi02", "eta0", "deta0", "sigma"])
            for row in zip(self.t, self.xi01, self.xi02, self.dxi01, self.dxi02,
                           self.eta0, self.deta0, self.sigma):
                w.writerow([repr(float(v)) for v in row])


def solve_classical(config: ScenarioConfig, samples_per_period: int = 64,
                    rtol=RTOL, atol=ATOL) -> ClassicalSolution:
    """Solve for xi0 and eta0 (with sigma) on the whole window."""
    xt = solve_xi0(config, rtol, atol)
    et = solve_eta0(config, rtol, atol)
    wmax = max(config.omega_in, config.omega_out)
    n = int(np.ceil((config.t_max - config.t_min) * wmax / (2 * np.pi) * samples_per_period)) + 1
    t = np.linspace(config.t_min, config.t_max, max(n, 2))
    x = xt(t)
    e = et(t)
    return ClassicalSolution(t, x[0], x[1], x[2], x[3], e[0], e[1], e[2], x[4],
                             config.omega_in, config.omega_out, xt, et, config)


# ---------------------------------------------------------------------------
# asymptotic data


@dataclass
class AsymptoticData:
    C1: complex
    C2: complex
    delta1: float
    delta2: float
    rho: float
    d: complex
    nu: float
    beta: float
    delta: float
    fit_error: float


def d_of_t(sol: ClassicalSolution, t):
    """d(t) = i/sqrt(2 Omega_in) int xi0 F0 via the local identity
    d = i (xi0 eta0' - xi0' eta0)/sqrt(2 Omega_in)."""
    s = sol.state(t)
    return 1j * (s["xi"] * s["deta"] - s["dxi"] * s["eta"]) / np.sqrt(2 * sol.omega_in)


def extract_asymptotics(sol: ClassicalSolution, tail: float = 0.2,
                        tol: float = 1e-6) -> AsymptoticData:
    cfg = sol.config
    wo = sol.omega_out
    t0 = cfg.t_max - tail * (cfg.t_max - cfg.t_min)
    t = sol.t[sol.t >= t0]
    om2 = cfg.omega_sq(t)
    if np.max(np.abs(om2 - wo ** 2)) > 1e-8 * max(1.0, wo ** 2):
        raise AsymptoticRegionNotReached(
            "Omega0^2 differs from omega_out^2 in the final window")
    f = cfg.force(t)
    if np.max(np.abs(f)) > 1e-8:
        raise AsymptoticRegionNotReached("F0 not negligible in the final window")
    s = sol.state(t)
    xi, dxi = s["xi"], s["dxi"]
    c1 = 0.5 * (xi + dxi / (1j * wo)) * np.exp(-1j * wo * t)
    c2 = 0.5 * (xi - dxi / (1j * wo)) * np.exp(1j * wo * t)
    C1, C2 = complex(np.mean(c1)), complex(np.mean(c2))
    recon = C1 * np.exp(1j * wo * t) + C2 * np.exp(-1j * wo * t)
    err = float(np.max(np.abs(recon - xi)))
    if err > tol:
        raise AsymptoticRegionNotReached(f"out-form reconstruction error {err:.3e}")
    d = complex(np.mean(d_of_t(sol, t)))
    return AsymptoticData(
        C1=C1, C2=C2, delta1=float(np.angle(C1)), delta2=float(np.angle(C2)),
        rho=abs(C2 / C1) ** 2, d=d, nu=abs(d) ** 2, beta=float(np.angle(d)),
        delta=float(np.angle(C1) + np.angle(C2)), fit_error=err)


# ---------------------------------------------------------------------------
# characteristics of the noise-free transport after t_e


class CharacteristicFrame:
    """First integrals of the noise-free (u1..u4) flow, anchored at ``t_e``.

    ``map(xi, t)`` sends the value ``xi`` held by a characteristic at ``t_e``
    to its position ``u`` at time ``t``.
    """

    def __init__(self, sol: ClassicalSolution, t_e: float):
        self.sol = sol
        self.t_e = float(t_e)
        self.omega_in = sol.omega_in
        s = sol.state(self.t_e)
        self.d1, self.d2 = s["xi"].real, s["xi"].imag
        self.d3, self.d4 = s["dxi"].real, s["dxi"].imag
        self.d5, self.d6 = s["eta"], s["deta"]

    @property
    def d(self):
        return (self.d1, self.d2, self.d3, self.d4, self.d5, self.d6)

    def functions(self, t):
        """e11, e12, e21, e22, h1, h2 at ``t``."""
        s = self.sol.state(t)
        x1, x2 = s["xi"].real, s["xi"].imag
        v1, v2 = s["dxi"].real, s["dxi"].imag
        d1, d2, d3, d4, d5, d6 = self.d
        e21 = d1 * x2 - d2 * x1
        e22 = d4 * x1 - d3 * x2
        e11 = d1 * v2 - d2 * v1
        e12 = d4 * v1 - d3 * v2
        a, b = d2 * d6 - d4 * d5, d3 * d5 - d1 * d6
        h1 = a * x1 + b * x2 + self.omega_in * s["eta"]
        h2 = a * v1 + b * v2 + self.omega_in * s["deta"]
        return e11, e12, e21, e22, h1, h2

    def map(self, xi_vars, t):
        x1, x2, x3, x4 = (np.asarray(v, float) for v in xi_vars)
        e11, e12, e21, e22, h1, h2 = self.functions(t)
        w = self.omega_in
        p = e21 * x3 + e22
        den = p * p + e21 * e21 * x4 * x4
        if np.any(den == 0):
            raise SingularCharacteristics("(e21 xi3 + e22)^2 + e21^2 xi4^2 = 0")
        u1 = (e22 * x1 + e21 * x2 + h1) / w
        u2 = (e12 * x1 + e11 * x2 + h2) / w
        u3 = ((e11 * x3 + e12) * p + e11 * e21 * x4 * x4) / den
        u4 = w * w * x4 / den
        return np.array([u1, u2, u3, u4])

    def jacobian(self, xi_vars, t):
        """det d(u1..u4)/d(xi1..xi4) = Omega_in^4 / |e21 (xi3 + i xi4) + e22|^4."""
        _, _, x3, x4 = (np.asarray(v, float) for v in xi_vars)
        _, _, e21, e22, _, _ = self.functions(t)
        den = (e21 * x3 + e22) ** 2 + e21 ** 2 * x4 ** 2
        if np.any(den == 0):
            raise SingularCharacteristics("(e21 xi3 + e22)^2 + e21^2 xi4^2 = 0")
        return self.omega_in ** 4 / den ** 2


def characteristics_map(frame: CharacteristicFrame, xi_vars, t):
    return frame.map(xi_vars, t)


def jacobian(frame: CharacteristicFrame, xi_vars, t):
    return frame.jacobian(xi_vars, t)
