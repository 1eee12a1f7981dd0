"""Averages of exponential functionals of diffusions via sink equations.

For a diffusion with forward operator L,

    < exp(-int_{t0}^t V1(x(s), x(t)) ds - V2(x(t))) > = int exp(-V2(x)) Q(x, x, t) dx,

where Q(., x', t) solves dQ/dt = (L - V1(., x')) Q from delta(x - x0).  The
endpoint argument x' is a parameter: it is sampled on a coarse grid and the
diagonal Q(x, x, t) is obtained by cubic interpolation across that family.

Expanding in V1 gives Q = sum_k (-1)^k Q_k with Q_0 the transition density and
dQ_k/dt = L Q_k + V1 Q_{k-1}, Q_k(t0) = 0.  All three constructions (direct
solve, Neumann terms, integral-equation residual) share one Crank-Nicolson
stepper with a Rannacher start, so they agree to round-off at the discrete
level; the continuum checks are done against Monte Carlo and closed forms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline

from .fokker_planck import Axis, GridFunction, delta_gaussian
from .rng import NoiseStream
from .sde import STREAM_KAC, Estimate, mc_average


class FeynmanKacError(RuntimeError):
    pass


@dataclass
class GeneratorSpec:
    """Drift a(x) and diffusion matrix D(x) = b b^T / 2 on a 1D or 2D grid.

    ``drift(*X)`` returns one array per axis; ``diffusion(*X)`` returns a dict
    {(i, j): array} for i <= j.  Coefficients are time independent.
    """

    axes: tuple
    drift: Callable
    diffusion: Callable

    def mesh(self):
        return np.meshgrid(*[a.coords for a in self.axes], indexing="ij")

    @property
    def shape(self):
        return tuple(a.n for a in self.axes)

    def operator(self):
        """Forward operator -d_i(a_i P) + d_i d_j(D_ij P), central, zero outside."""
        shape = self.shape
        nd = len(shape)
        N = int(np.prod(shape))
        idx = np.arange(N).reshape(shape)
        X = self.mesh()
        a = [np.broadcast_to(v, shape) for v in self.drift(*X)]
        D = {k: np.broadcast_to(v, shape) for k, v in self.diffusion(*X).items()}
        h = [ax.h for ax in self.axes]
        rows, cols, vals = [], [], []

        def couple(offsets, coef):
            # row x receives coef(x + offset) * P(x + offset)
            src = [slice(None)] * nd
            dst = [slice(None)] * nd
            for ax, d in offsets:
                n = shape[ax]
                if d > 0:
                    dst[ax], src[ax] = slice(0, n - d), slice(d, n)
                elif d < 0:
                    dst[ax], src[ax] = slice(-d, n), slice(0, n + d)
            r = idx[tuple(dst)].ravel()
            c = idx[tuple(src)].ravel()
            v = coef[tuple(src)].ravel()
            rows.append(r)
            cols.append(c)
            vals.append(v)

        for i in range(nd):
            couple([(i, 1)], -a[i] / (2 * h[i]))
            couple([(i, -1)], a[i] / (2 * h[i]))
            if (i, i) in D:
                d = D[(i, i)] / h[i] ** 2
                couple([(i, 1)], d)
                couple([(i, -1)], d)
                couple([], -2 * d)
        for (i, j), d in D.items():
            if i == j:
                continue
            c = 2 * d / (4 * h[i] * h[j])
            for si, sj, sg in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                couple([(i, si), (j, sj)], sg * c)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(N, N))


@dataclass
class FunctionalSpec:
    """exp(-int_{t0}^t V1(x(s), x(t)) ds - V2(x(t))).

    ``V1(X, Xp)`` gets the mesh arrays and the endpoint tuple; ``V2(X)`` the
    mesh arrays.  ``endpoint_dependent`` marks V1 that really uses Xp.
    """

    t0: float
    t: float
    V1: Callable | None = None
    V2: Callable | None = None
    endpoint_dependent: bool = False

    def v1(self, X, xp=None):
        if self.V1 is None:
            return np.zeros(X[0].shape)
        return np.broadcast_to(self.V1(X, xp), X[0].shape).astype(float)

    def v2(self, X):
        if self.V2 is None:
            return np.zeros(X[0].shape)
        return np.broadcast_to(self.V2(X), X[0].shape).astype(float)


class Stepper:
    """Crank-Nicolson for du/dt = (A - diag(v)) u + s with ``rannacher``
    backward-Euler half steps at the start."""

    def __init__(self, A, dt, n_steps, v=None, rannacher=2):
        N = A.shape[0]
        I = sp.identity(N, format="csc")
        M = (A - sp.diags(v)) if v is not None else A
        self.M = M.tocsr()
        self.dt = dt
        self.n = n_steps
        self.rannacher = rannacher
        hb = dt / 2
        self._be = spla.splu((I - hb * M).tocsc()) if rannacher else None
        self._cn = spla.splu((I - 0.5 * dt * M).tocsc())
        self._cn_rhs = (I + 0.5 * dt * M).tocsr()

    def substeps(self):
        """Sequence of (kind, h): Rannacher half steps replace the first steps."""
        out = []
        for k in range(self.n):
            if k < self.rannacher:
                out += [("be", self.dt / 2)] * 2
            else:
                out.append(("cn", self.dt))
        return out

    def run(self, u0, source=None):
        """Return the list of states after each sub-step (initial included).

        ``source(m)`` gives the forcing at sub-step boundary m (len = substeps+1).
        """
        u = np.asarray(u0, float).copy()
        hist = [u.copy()]
        for m, (kind, h) in enumerate(self.substeps()):
            if kind == "be":
                rhs = u + (h * source(m + 1) if source is not None else 0.0)
                u = self._be.solve(rhs)
            else:
                rhs = self._cn_rhs @ u
                if source is not None:
                    rhs = rhs + 0.5 * h * (source(m) + source(m + 1))
                u = self._cn.solve(rhs)
            hist.append(u)
        return hist

    def times(self, t0):
        ts = [t0]
        for _, h in self.substeps():
            ts.append(ts[-1] + h)
        return np.array(ts)


def _steps(spec, dt):
    n = max(int(math.ceil((spec.t - spec.t0) / dt - 1e-12)), 1)
    return n, (spec.t - spec.t0) / n


def default_endpoints(axes, q0=None, n=9, tail=1e-5):
    """Endpoint grid per axis; with a density ``q0`` it spans the central
    1 - 2*tail quantile range of each marginal instead of the whole box."""
    if q0 is None:
        return [np.linspace(a.lo, a.hi, n) for a in axes]
    ends = []
    for i, a in enumerate(axes):
        other = tuple(j for j in range(len(axes)) if j != i)
        m = np.clip(q0.sum(axis=other) if other else q0, 0, None)
        c = np.cumsum(m) / m.sum()
        lo = a.coords[min(np.searchsorted(c, tail), a.n - 1)]
        hi = a.coords[min(np.searchsorted(c, 1 - tail), a.n - 1)]
        ends.append(np.linspace(lo, hi, n))
    return ends


@dataclass
class QFamily:
    gen: GeneratorSpec
    spec: FunctionalSpec
    endpoints: list  # per-axis endpoint coordinates (empty when V1 ignores x')
    values: np.ndarray  # (*endpoint shape, *grid shape) at time t
    history: list | None = None  # per-substep flattened states (single-member family)
    times: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def diagonal(self) -> GridFunction:
        """Q(x, x, t) on the grid."""
        if not self.endpoints:
            return GridFunction(self.gen.axes, self.values, self.spec.t)
        vals = self.values
        coords = [a.coords for a in self.gen.axes]
        nd = len(coords)
        for i in range(nd):
            # interpolate along the leading endpoint axis at the grid coordinate of axis i
            e = self.endpoints[i]
            cs = CubicSpline(e, vals, axis=0)(np.clip(coords[i], e[0], e[-1]))
            # cs: (n_i, *remaining endpoint axes, *grid) -> take diagonal with grid axis i
            grid_axis = cs.ndim - nd + i
            cs = np.moveaxis(cs, grid_axis, 1)
            vals = np.diagonal(cs, axis1=0, axis2=1)
            vals = np.moveaxis(vals, -1, vals.ndim - nd + i)
        return GridFunction(self.gen.axes, vals, self.spec.t)

    def average(self):
        """int exp(-V2) Q(x, x, t) dx."""
        g = self.diagonal()
        w = np.exp(-self.spec.v2(self.gen.mesh()))
        return float(g.integrate(w))


def solve_Q(gen: GeneratorSpec, spec: FunctionalSpec, x0, dt: float = 1e-3,
            endpoints=None, n_endpoints: int = 9, keep_history: bool = False,
            width_cells: float = 2.0) -> QFamily:
    """Solve dQ/dt = (L - V1(., x')) Q from a discrete delta at ``x0``."""
    A = gen.operator()
    X = gen.mesh()
    shape = gen.shape
    q0 = delta_gaussian(gen.axes, x0, width_cells).values.ravel()
    n, h = _steps(spec, dt)
    if spec.endpoint_dependent:
        if endpoints is None:
            p0 = Stepper(A, h, n).run(q0)[-1].reshape(shape)
            endpoints = default_endpoints(gen.axes, p0, n_endpoints)
        ends = endpoints
        grids = np.meshgrid(*ends, indexing="ij")
        out = np.empty(grids[0].shape + shape)
        for k in np.ndindex(grids[0].shape):
            xp = tuple(g[k] for g in grids)
            st = Stepper(A, h, n, spec.v1(X, xp).ravel())
            out[k] = st.run(q0)[-1].reshape(shape)
        if not np.all(np.isfinite(out)):
            raise FeynmanKacError("non-finite values in the sink solve")
        return QFamily(gen, spec, list(ends), out)
    st = Stepper(A, h, n, spec.v1(X).ravel())
    hist = st.run(q0)
    if not np.all(np.isfinite(hist[-1])):
        raise FeynmanKacError("non-finite values in the sink solve")
    return QFamily(gen, spec, [], hist[-1].reshape(shape),
                   hist if keep_history else None, st.times(spec.t0) if keep_history else None,
                   {"dt": h, "n_steps": n})


@dataclass
class NeumannResult:
    partial_sums: list  # GridFunctions S_k = sum_{j<=k} (-1)^j Q_j at time t
    term_norms: np.ndarray  # L2 norms of Q_k(t)
    converged_estimate: float  # norm of the last term relative to the last partial sum
    diverging: bool


def neumann_terms(gen: GeneratorSpec, spec: FunctionalSpec, x0, k_max: int,
                  dt: float = 1e-3, xp=None, width_cells: float = 2.0) -> NeumannResult:
    """Partial sums of sum_k (-1)^k Q_k for a fixed endpoint parameter ``xp``."""
    A = gen.operator()
    X = gen.mesh()
    v = spec.v1(X, xp).ravel()
    n, h = _steps(spec, dt)
    st = Stepper(A, h, n)
    q0 = delta_gaussian(gen.axes, x0, width_cells).values.ravel()
    prev = st.run(q0)
    vol = float(np.prod([a.h for a in gen.axes]))
    sums = [GridFunction(gen.axes, prev[-1].reshape(gen.shape), spec.t)]
    norms = [float(np.linalg.norm(prev[-1]) * math.sqrt(vol))]
    total = prev[-1].copy()
    zero = np.zeros_like(q0)
    for k in range(1, k_max + 1):
        src = [v * p for p in prev]
        cur = st.run(zero, source=lambda m, src=src: src[m])
        total = total + (-1) ** k * cur[-1]
        sums.append(GridFunction(gen.axes, total.reshape(gen.shape).copy(), spec.t))
        norms.append(float(np.linalg.norm(cur[-1]) * math.sqrt(vol)))
        prev = cur
    norms = np.array(norms)
    growing = len(norms) > 2 and bool(np.all(np.diff(norms[1:]) > 0))
    est = norms[-1] / max(np.linalg.norm(total) * math.sqrt(vol), 1e-300)
    return NeumannResult(sums, norms, float(est), growing)


def integral_equation_residual(history, gen: GeneratorSpec, spec: FunctionalSpec, x0,
                               dt: float = 1e-3, xp=None, width_cells: float = 2.0):
    """|| Q + int ds int dy P(x, t | y, s) V1(y) Q(y, s) - Q0 || / || Q0 || at time t.

    ``history`` holds Q at every sub-step of the shared stepper (as returned by
    ``solve_Q(..., keep_history=True)`` or any candidate of the same length).
    The space-time integral is the Duhamel solution of du/dt = L u + V1 Q.
    """
    A = gen.operator()
    X = gen.mesh()
    v = spec.v1(X, xp).ravel()
    n, h = _steps(spec, dt)
    st = Stepper(A, h, n)
    if len(history) != len(st.substeps()) + 1:
        raise FeynmanKacError("history does not match the stepper time grid")
    q0 = delta_gaussian(gen.axes, x0, width_cells).values.ravel()
    Q0 = st.run(q0)[-1]
    u = st.run(np.zeros_like(q0), source=lambda m: v * history[m])[-1]
    r = history[-1] + u - Q0
    return float(np.linalg.norm(r) / np.linalg.norm(Q0)), r.reshape(gen.shape)


def mc_functional(gen: GeneratorSpec, spec: FunctionalSpec, x0, n_paths: int,
                  dt: float = 1e-3, seed: int = 0, block_size: int = 4096) -> Estimate:
    """Monte Carlo estimate of the averaged functional by Euler-Maruyama paths.

    Each path weighs int V1(x(s), x(t)) ds with its own endpoint (trapezoid in
    time).  Each block of ``block_size`` paths draws from its own stream keyed
    by (seed, block index), so the result is fixed by (seed, block_size).
    """
    nd = len(gen.axes)
    n, h = _steps(spec, dt)
    x0 = np.asarray(x0, float)
    out = np.empty(n_paths)
    for b, start in enumerate(range(0, n_paths, block_size)):
        m = min(block_size, n_paths - start)
        rng = NoiseStream(seed, STREAM_KAC + b, h)
        x = np.repeat(x0[:, None], m, axis=1)
        path = np.empty((n + 1, nd, m))
        path[0] = x
        for k in range(n):
            X = tuple(x)
            a = np.array([np.broadcast_to(v, (m,)) for v in gen.drift(*X)])
            Dd = gen.diffusion(*X)
            D = np.zeros((m, nd, nd))
            for (i, j), v in Dd.items():
                D[:, i, j] = D[:, j, i] = np.broadcast_to(v, (m,))
            B = np.linalg.cholesky(2 * D + 1e-300 * np.eye(nd))
            dW = rng.increments((m, nd))
            x = x + a * h + np.einsum("pij,pj->ip", B, dW)
            path[k + 1] = x
        end = tuple(path[-1])
        Xs = tuple(path[:, i, :] for i in range(nd))
        v1 = spec.V1(Xs, end) if spec.V1 is not None else np.zeros((n + 1, m))
        v1 = np.broadcast_to(v1, (n + 1, m))
        integral = h * (v1.sum(axis=0) - 0.5 * (v1[0] + v1[-1]))
        v2 = spec.V2(end) if spec.V2 is not None else 0.0
        out[start:start + m] = np.exp(-integral - v2)
    return mc_average(out)


# ---------------------------------------------------------------------------
# standard examples


def brownian_generator(L: float = 6.0, n: int = 401, diffusion: float = 0.5) -> GeneratorSpec:
    """Standard Brownian motion (generator diffusion * d^2) on [-L, L]."""
    return GeneratorSpec((Axis(-L, L, n),), lambda x: [np.zeros_like(x)],
                         lambda x: {(0, 0): np.full_like(x, diffusion)})


def kac_exact(lam: float, t: float) -> float:
    """E exp(-lam int_0^t B^2) for standard Brownian motion from 0."""
    return 1.0 / math.sqrt(math.cosh(math.sqrt(2 * lam) * t))
