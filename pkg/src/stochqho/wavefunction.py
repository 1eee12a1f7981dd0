"""Oscillator eigenfunctions, the exact wave functional and transition amplitudes.

Conventions: xi = r exp(i gamma) solves xi'' + Omega^2 xi = 0 with
xi ~ exp(i Omega_in t) in the past; eta is the classical path.  The wave
functional of in-state n is

    Psi_n(x, t) = r^{-1/2} exp{i[eta'(x-eta) + r'/(2r) (x-eta)^2 + sigma]}
                  * phi_n^in((x-eta)/r) * exp(-i(n+1/2) gamma)

and c[n, m] is its amplitude on the out-state m,
phi_m^out(x) exp(-i(m+1/2) Omega_out t).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from ._accel import njit, use_numba

UNITARITY_BOUND = 1e-6


class SingularFrame(ZeroDivisionError):
    pass


class TruncationWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Hermite functions


def eigenfunctions(n_max: int, omega: float, x) -> np.ndarray:
    """phi_0..phi_{n_max} of frequency ``omega`` on ``x``; shape (n_max+1, len(x)).

    Normalized three-term recurrence carried with a running log-scale so that
    large n*x neither overflows nor underflows prematurely.
    """
    x = np.atleast_1d(np.asarray(x, float))
    y = np.sqrt(omega) * x
    out = np.zeros((n_max + 1, x.size))
    logs = 0.25 * np.log(omega / np.pi) - 0.5 * y * y
    prev = np.zeros_like(y)
    cur = np.ones_like(y)
    out[0] = np.exp(logs)
    for n in range(n_max):
        nxt = np.sqrt(2.0 / (n + 1)) * y * cur - np.sqrt(n / (n + 1.0)) * prev
        prev, cur = cur, nxt
        big = np.abs(cur) > 1e100
        if np.any(big):
            cur = np.where(big, cur * 1e-100, cur)
            prev = np.where(big, prev * 1e-100, prev)
            logs = np.where(big, logs + 100 * np.log(10.0), logs)
        with np.errstate(over="ignore", under="ignore"):
            out[n + 1] = cur * np.exp(logs)
    return out


def eval_eigenfunction(n: int, omega: float, x):
    """Single eigenfunction phi_n(x) for frequency ``omega``."""
    if n < 0 or omega <= 0:
        raise ValueError("need n >= 0 and omega > 0")
    v = eigenfunctions(n, omega, x)[n]
    return float(v[0]) if np.ndim(x) == 0 else v


def hermite_nodes(order: int, center: float, width: float):
    """Gauss-Hermite nodes/weights for plain integrals  int f(x) dx.

    Nodes are x = center + width*s; weights already include exp(s^2)*width,
    so the rule is exact for Gaussian(width)-times-polynomial integrands.
    """
    s, w = np.polynomial.hermite.hermgauss(order)
    return center + width * s, w * np.exp(s * s) * width


# ---------------------------------------------------------------------------
# wave functional


@dataclass
class TrajectoryPoint:
    """Trajectory data at one time (scalars or equal-shape arrays)."""

    t: float
    xi: complex
    dxi: complex
    eta: float = 0.0
    deta: float = 0.0
    sigma: float = 0.0
    gamma: float | None = None

    @property
    def r(self):
        return np.abs(self.xi)

    @property
    def dr(self):
        return np.real(np.conj(self.xi) * self.dxi) / np.abs(self.xi)

    @property
    def phase(self):
        """Continuous gamma if provided, else the principal arg of xi."""
        return np.angle(self.xi) if self.gamma is None else self.gamma


def psi_stc(n: int, x, traj: TrajectoryPoint, omega_in: float):
    """Psi_n(x, t) for the trajectory state ``traj``."""
    return psi_stc_all(n, x, traj, omega_in)[n]


def psi_stc_all(n_max: int, x, traj: TrajectoryPoint, omega_in: float):
    """Psi_0..Psi_{n_max} on ``x``; shape (n_max+1, len(x))."""
    r = traj.r
    if np.any(r <= 0):
        raise SingularFrame("r <= 0")
    x = np.atleast_1d(np.asarray(x, float))
    y = x - traj.eta
    phase = traj.deta * y + traj.dr / (2 * r) * y * y + traj.sigma
    base = r ** -0.5 * np.exp(1j * phase)
    phi = eigenfunctions(n_max, omega_in, y / r)
    n = np.arange(n_max + 1)[:, None]
    return base * phi * np.exp(-1j * (n + 0.5) * traj.phase)


def out_state(m_max: int, omega_out: float, x, t):
    """phi_m^out(x) exp(-i (m+1/2) Omega_out t) for m = 0..m_max."""
    m = np.arange(m_max + 1)[:, None]
    return eigenfunctions(m_max, omega_out, x) * np.exp(-1j * (m + 0.5) * omega_out * t)


def project_direct(traj: TrajectoryPoint, omega_in, omega_out, n_max, order=None):
    """c[n, m] by Gauss-Hermite quadrature of <phi_m^out | Psi_n> (oracle path)."""
    order = order or 4 * n_max + 64
    # matches the real part of the combined Gaussian exponent of the integrand
    a_in, a_out = omega_in / traj.r ** 2, omega_out
    width = np.sqrt(2.0 / (a_in + a_out))
    x, w = hermite_nodes(order, a_in * traj.eta / (a_in + a_out), width)
    psi = psi_stc_all(n_max, x, traj, omega_in)
    out = out_state(n_max, omega_out, x, traj.t)
    return (psi * w) @ np.conj(out).T


# ---------------------------------------------------------------------------
# generating function coefficients


@dataclass
class GeneratingCoefficients:
    """exp(A z1^2 + B z2^2 + C z1 z2 + D z1 + L z2 + M) times ``prefactor``.

    z1 counts out-quanta, z2 in-quanta.  ``c00`` is fixed on the square-root
    branch of sqrt(2 sqrt(Wi Wo) e^{i Wo t}/(K xi)) e^{M - i Wo t/2}, which is
    continuous once the out-region is reached.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    L: np.ndarray
    M: np.ndarray
    K: np.ndarray
    prefactor: np.ndarray
    c00: np.ndarray


def generating_coefficients(xi, dxi, eta, deta, sigma, t, omega_in, omega_out):
    xi = np.asarray(xi, complex)
    dxi = np.asarray(dxi, complex)
    if np.any(xi == 0):
        raise SingularFrame("xi = 0")
    wi, wo = float(omega_in), float(omega_out)
    K = -1j * dxi / xi + wo
    if np.any(K == 0):
        raise SingularFrame("K = 0")
    eta = np.asarray(eta, float)
    deta = np.asarray(deta, float)
    e1 = np.exp(1j * wo * t)
    Kx = K * xi
    A = 0.5 * e1 * e1 * (2 * wo / K - 1)
    B = 0.5 * (2 * wi / (Kx * xi) - np.conj(xi) ** 2 / np.abs(xi) ** 2)
    C = 2 * np.sqrt(wi * wo) / Kx * e1
    L = -np.sqrt(2 * wi) / Kx * (wo * eta - 1j * deta)
    D = np.sqrt(2 * wo) * e1 * ((1 - wo / K) * eta + 1j * deta / K)
    M = (0.5 * wo * (wo / K - 1) * eta ** 2 - deta ** 2 / (2 * K)
         - 1j * wo / K * eta * deta + 1j * (0.5 * wo * t + sigma))
    pref = np.sqrt(2 * np.sqrt(wi * wo) / Kx)
    c00 = np.sqrt(2 * np.sqrt(wi * wo) * e1 / Kx) * np.exp(M - 0.5j * wo * t)
    return GeneratingCoefficients(A, B, C, D, L, M, K, pref, c00)


# ---------------------------------------------------------------------------
# c_nm recurrence


@njit(cache=True, nogil=True)
def _cnm_kernel(A, B, C, D, L, c00, n_max, out):
    sq = np.sqrt(np.arange(n_max + 2).astype(np.float64))
    s = np.zeros((n_max + 1, n_max + 1), dtype=np.complex128)
    for p in range(A.shape[0]):
        a, b, c, d, l = A[p], B[p], C[p], D[p], L[p]
        s[:, :] = 0.0
        s[0, 0] = 1.0
        for i in range(n_max):  # out index, in index 0
            v = d * s[i, 0]
            if i > 0:
                v += 2.0 * a * sq[i] * s[i - 1, 0]
            s[i + 1, 0] = v / sq[i + 1]
        for j in range(n_max):  # raise in index
            for i in range(n_max + 1):
                v = l * s[i, j]
                if j > 0:
                    v += 2.0 * b * sq[j] * s[i, j - 1]
                if i > 0:
                    v += c * sq[i] * s[i - 1, j]
                s[i, j + 1] = v / sq[j + 1]
        for n in range(n_max + 1):
            for m in range(n_max + 1):
                out[p, n, m] = c00[p] * s[m, n]


def _cnm_numpy(A, B, C, D, L, c00, n_max):
    N = A.shape[0]
    sq = np.sqrt(np.arange(n_max + 2, dtype=float))
    s = np.zeros((N, n_max + 1, n_max + 1), complex)
    s[:, 0, 0] = 1.0
    for i in range(n_max):
        v = D * s[:, i, 0]
        if i > 0:
            v = v + 2 * A * sq[i] * s[:, i - 1, 0]
        s[:, i + 1, 0] = v / sq[i + 1]
    for j in range(n_max):
        v = L[:, None] * s[:, :, j]
        if j > 0:
            v = v + 2 * (B * sq[j])[:, None] * s[:, :, j - 1]
        v[:, 1:] += C[:, None] * sq[1:n_max + 1] * s[:, :-1, j]
        s[:, :, j + 1] = v / sq[j + 1]
    return c00[:, None, None] * np.transpose(s, (0, 2, 1))


def cnm_batch(gen: GeneratingCoefficients, n_max: int) -> np.ndarray:
    """c[p, n, m] for every trajectory p in a vectorized ``gen``."""
    arrs = [np.atleast_1d(np.asarray(getattr(gen, k), complex))
            for k in ("A", "B", "C", "D", "L", "c00")]
    size = max(a.size for a in arrs)
    arrs = [np.ascontiguousarray(np.broadcast_to(a, (size,))) for a in arrs]
    if use_numba():
        out = np.empty((size, n_max + 1, n_max + 1), complex)
        _cnm_kernel(*arrs, n_max, out)
        return out
    return _cnm_numpy(*arrs, n_max)


@dataclass
class CoefficientMatrix:
    c: np.ndarray
    t: float = float("nan")
    trajectory_id: int = -1

    @property
    def n_max(self):
        return self.c.shape[0] - 1

    def row_defect(self):
        return np.abs(1.0 - np.sum(np.abs(self.c) ** 2, axis=1))

    def flagged_rows(self, bound=UNITARITY_BOUND):
        return np.nonzero(self.row_defect() > bound)[0]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "m", "re", "im", "abs2"])
            for n in range(self.c.shape[0]):
                for m in range(self.c.shape[1]):
                    z = self.c[n, m]
                    w.writerow([n, m, repr(z.real), repr(z.imag), repr(abs(z) ** 2)])


def coefficients_cnm(gen: GeneratingCoefficients, n_max: int, t=float("nan"),
                     check_rows: int | None = None, bound=UNITARITY_BOUND,
                     trajectory_id: int = -1) -> CoefficientMatrix:
    """Coefficient matrix for a single trajectory.

    ``check_rows`` rows (default: none) are tested for unitarity and a
    TruncationWarning is issued when the defect exceeds ``bound``.
    """
    c = cnm_batch(gen, n_max)[0]
    cm = CoefficientMatrix(c, float(t), trajectory_id)
    if check_rows:
        bad = [int(r) for r in cm.flagged_rows(bound) if r < check_rows]
        if bad:
            warnings.warn(f"n_max={n_max} too small: unitarity defect in rows {bad}",
                          TruncationWarning, stacklevel=2)
    return cm


def coefficients_from_trajectory(traj: TrajectoryPoint, omega_in, omega_out, n_max):
    gen = generating_coefficients(traj.xi, traj.dxi, traj.eta, traj.deta, traj.sigma,
                                  traj.t, omega_in, omega_out)
    return coefficients_cnm(gen, n_max, traj.t)
