"""Stochastic density matrices, distribution functions, entropies and the
ground-level energy with its shift and broadening."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from . import fokker_planck as fp
from .wavefunction import TrajectoryPoint, psi_stc_all

SPECTRAL_TOL = 1e-10
NEGATIVE_EIG_TOL = 1e-8


# ---------------------------------------------------------------------------
# density matrices


@dataclass
class DensityMatrixGrid:
    x: np.ndarray
    values: np.ndarray  # rho(x_i, x_j), complex
    kind: str  # "realization", "averaged" or "total"
    omega_in: float
    weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("realization", "averaged", "total"):
            raise ValueError(f"unknown density-matrix kind {self.kind!r}")

    @property
    def h(self):
        return float(self.x[1] - self.x[0])

    def operator(self):
        """Matrix whose ordinary trace equals trace_x (uniform grid)."""
        return math.sqrt(self.omega_in / math.pi) * self.h * self.values

    def hermiticity_error(self):
        v = self.values
        return float(np.max(np.abs(v - v.conj().T)) / max(np.max(np.abs(v)), 1e-300))


def trace_x(K, x=None, omega_in: float | None = None) -> float:
    """sqrt(Omega_in/pi) int K(x, x) dx (trapezoid on the grid)."""
    if isinstance(K, DensityMatrixGrid):
        x, omega_in, K = K.x, K.omega_in, K.values
    d = np.real(np.diagonal(np.asarray(K)))
    return float(math.sqrt(omega_in / math.pi) * trapezoid(d, x))


def realization_matrix(psi, x, omega_in, weight=1.0) -> DensityMatrixGrid:
    """sqrt(pi/Omega_in) Psi(x) conj(Psi(x')) for one realization."""
    psi = np.asarray(psi, complex)
    v = weight * math.sqrt(math.pi / omega_in) * np.outer(psi, psi.conj())
    return DensityMatrixGrid(np.asarray(x, float), v, "realization", omega_in)


def build_rho0(config, ensemble, x, index: int = -1, m: int = 0, chunk: int = 512,
               keep: int = 0):
    """Averaged level-m density matrix from a trajectory ensemble.

    Flagged trajectories are excluded.  Returns (averaged matrix, list of the
    first ``keep`` per-realization matrices).
    """
    x = np.asarray(x, float)
    xi, dxi = ensemble.xi(index)
    s = ensemble.states[index]
    good = np.nonzero(~ensemble.flags)[0]
    acc = np.zeros((x.size, x.size), complex)
    singles = []
    wi = config.omega_in
    gamma = ensemble.gamma_start + s[5]
    for a in range(0, good.size, chunk):
        idx = good[a:a + chunk]
        rows = []
        for p in idx:
            tp = TrajectoryPoint(float(ensemble.times[index]), complex(xi[p]), complex(dxi[p]),
                                 float(s[0][p]), float(s[1][p]),
                                 float(ensemble.sigma_start + s[6][p]), float(gamma[p]))
            rows.append(psi_stc_all(m, x, tp, wi)[m])
        P = np.array(rows)
        acc += P.T @ P.conj()
        if len(singles) < keep:
            singles += [realization_matrix(P[i], x, wi)
                        for i in range(min(keep - len(singles), len(idx)))]
    acc *= math.sqrt(math.pi / wi) / good.size
    return DensityMatrixGrid(x, acc, "averaged", wi, meta={"n": int(good.size)}), singles


# ---------------------------------------------------------------------------
# distribution functions


def planck_w0(beta: float) -> float:
    """e^{beta/2} / (e^beta - 1), written to stay finite for large beta."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    return math.exp(-beta / 2) / -math.expm1(-beta)


def canonical_weights(beta: float, n: int) -> np.ndarray:
    """w0^(m) = exp(-(m + 1/2) beta) for m < n."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    return np.exp(-(np.arange(n) + 0.5) * beta)


@dataclass
class DistributionResult:
    w: np.ndarray
    total: float
    total0: float
    truncation_defect: float


def nonequilibrium_w(delta, w0) -> DistributionResult:
    """w^(m) = sum_k [w0^(k) Delta_km - w0^(m) Delta_mk] + w0^(m).

    ``delta[k, m]`` = <|c_km|^2>.  The gain-loss sum cancels term by term, so
    sum_m w^(m) = sum_m w0^(m) holds on any truncation; the defect reported
    is the weighted row-sum defect sum_m w0^(m) |1 - sum_k Delta_mk|.
    """
    D = np.asarray(delta, float)
    w0 = np.asarray(w0, float)
    n = min(D.shape[0], w0.size)
    D = D[:n, :n]
    w0 = w0[:n]
    w = w0 @ D - w0 * D.sum(axis=1) + w0
    defect = float(np.sum(w0 * np.abs(1 - D.sum(axis=1))))
    return DistributionResult(w, float(w.sum()), float(w0.sum()), defect)


# ---------------------------------------------------------------------------
# entropies


@dataclass
class SpectrumDiagnostics:
    eigenvalues: np.ndarray  # descending
    lambda1: float
    trace: float
    rest: float  # sum_{i >= 2} |lambda_i|
    rank_one: bool
    entropy: float  # -sum lambda ln lambda, 0 ln 0 := 0


def _spectrum(M):
    M = np.asarray(M)
    H = 0.5 * (M + M.conj().T)
    return np.linalg.eigvalsh(H)[::-1]


def _entropy(lam, tol):
    pos = lam[lam > tol]
    return float(-np.sum(pos * np.log(pos)))


def entropy_formal_partial(rho, tol: float = SPECTRAL_TOL) -> SpectrumDiagnostics:
    """Spectrum of a per-realization matrix; a plain array is used as given."""
    M = rho.operator() if isinstance(rho, DensityMatrixGrid) else np.asarray(rho)
    lam = _spectrum(M)
    l1 = float(lam[0])
    rest = float(np.sum(np.abs(lam[1:])))
    return SpectrumDiagnostics(lam, l1, float(np.real(np.trace(M))), rest,
                               rest < tol * abs(l1), _entropy(lam, tol * abs(l1)))


@dataclass
class EntropyResult:
    normalized: float
    raw: float
    trace: float
    eigenvalues: np.ndarray


def entropy_averaged(rho_av, neg_tol: float = NEGATIVE_EIG_TOL,
                     cutoff: float = 1e-12) -> EntropyResult:
    """-sum lambda ln lambda over the trace-normalized spectrum (and raw)."""
    M = rho_av.operator() if isinstance(rho_av, DensityMatrixGrid) else np.asarray(rho_av)
    lam = _spectrum(M)
    tr = float(np.sum(lam))
    if tr <= 0:
        raise ValueError("non-positive trace")
    if lam[-1] < -neg_tol * lam[0]:
        raise ValueError(f"negative eigenvalue {lam[-1]:.3e} beyond tolerance")
    ln = lam / tr
    return EntropyResult(_entropy(ln, cutoff), _entropy(lam, cutoff * tr), tr, lam)


# ---------------------------------------------------------------------------
# ground-level energy


@dataclass
class EnergyResult:
    E0: float  # level + shift
    shift: float
    broadening: float
    lifetime: float
    lam: float
    C0: float = float("nan")
    tail_error: float = float("nan")


def _k_brackets(ub, lam):
    """Curly brackets of K1 and K2, simplified with A00^2 = 1 + ub^2/lam."""
    A = np.sqrt(1 + ub * ub / lam)
    sm = np.sqrt((A - 1) / (2 * A * A))
    sp = np.sqrt((A + 1) / (2 * A * A))
    r = ub / math.sqrt(lam)
    k1 = -sm / (A * A) + r * sp / (A * A)
    k2 = -sm / (A * A) - r * sm / (A * A)
    return k1, k2


def ground_energy(config, lam: float = 1.0, L: float = 60.0, n: int = 4001,
                  conj_axes=None) -> EnergyResult:
    """Average ground-level energy for constant frequency and frequency noise.

    ``lam`` and the scaled variable ub = u3 / Omega_in enter as explicit inputs;
    q is the decaying solution of the stationary equation and C0 the conjugate
    normalization.  Domain lengths scale with Omega_in so results depend on
    eps1 / Omega_in^3 only.
    """
    w = config.omega_in
    if config.eps1 <= 0:
        return EnergyResult(0.5 * w, 0.0, 0.0, math.inf, lam, 0.0, 0.0)
    q = fp.solve_line_stationary(config.eps1, w, p=1, L=L * w, n=n)
    Y = fp.solve_conjugate("conjugate_energy", config.eps1, w, p=1, axes=conj_axes)
    C0 = fp.normalization_constant(q, Y, (0.0, 0.0, 0.0, w), w)
    u = q.q.coords(0)
    ub = u / w
    b1, b2 = _k_brackets(ub, lam)
    base = C0 * w * ub * q.q.values  # C0 q as a density in ub
    K1 = base * b1
    K2 = base * b2
    I1 = trapezoid(K1, ub)
    I2 = trapezoid(K2, ub)
    # integrands decay like |ub|^{-3/2}: tail beyond the box ~ 2 |K| |ub|
    tail = float(2 * max(abs(K1[0]), abs(K1[-1]), abs(K2[0]), abs(K2[-1])) * ub[-1])
    s = 1 / math.sqrt(lam)
    shift = -0.5 * w * s * I1
    broad = 0.5 * w * s * I2
    life = 2 * math.sqrt(lam) / w / I2 if I2 != 0 else math.inf
    return EnergyResult(0.5 * w + shift, shift, broad, life, lam, C0, 0.5 * w * s * tail)
