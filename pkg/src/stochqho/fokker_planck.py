"""Grid solvers for the Fokker-Planck, sink and stationary equations.

State axes are always (z1, z2, z3, z4) = (eta, eta', Re xi'/xi, Im xi'/xi).
An axis with a single node is "collapsed": the density is a delta factor
along it and no derivative is taken.  Collapsing is exact when the dynamics
leaves that coordinate pair fixed (F0 = eps2 = 0 keeps z1 = z2 = 0) or
decoupled (eps1 = 0 makes (z3, z4) deterministic and the (z1, z2) equations
independent of them).

Forward operator, in conservative form:

    dP/dt = -d1(z2 P) - d2((F0 - W0^2 z1) P) - d3(K3 P) - d4(K4 P)
            + (e2 + e1 z1^2) d2^2 P + e1 d3^2 P + 2 e1 z1 d2 d3 P - s z3 P

with K3 = z4^2 - z3^2 - W0^2, K4 = -2 z3 z4, e_i = eps_i p_i.  Expanding the
divergence of (K3, K4) gives the familiar +4 z3 reaction term.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp, trapezoid

from ._accel import njit, use_numba
from .classical import ClassicalSolution, solve_classical
from .scenario import ScenarioConfig

AXIS_NAMES = ("z1", "z2", "z3", "z4")


class FPError(RuntimeError):
    pass


class CFLError(FPError):
    pass


class MassLeakageError(FPError):
    pass


class DegenerateCovariance(FPError):
    pass


class StationarySolveError(FPError):
    pass


# ---------------------------------------------------------------------------
# grid functions


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("axis needs at least one node")
        if self.n > 1 and not self.hi > self.lo:
            raise ValueError("axis upper bound must exceed lower bound")

    @classmethod
    def point(cls, value):
        return cls(float(value), float(value), 1)

    @property
    def collapsed(self):
        return self.n == 1

    @property
    def coords(self):
        if self.n == 1:
            return np.array([self.lo])
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def h(self):
        return (self.hi - self.lo) / (self.n - 1) if self.n > 1 else 1.0


@dataclass
class GridFunction:
    """Values on a tensor grid; zero outside (absorbing boundary)."""

    axes: tuple
    values: np.ndarray
    t: float = float("nan")
    names: tuple = ()

    def __post_init__(self):
        self.axes = tuple(a if isinstance(a, Axis) else Axis(*a) for a in self.axes)
        self.values = np.asarray(self.values)
        if self.values.shape != tuple(a.n for a in self.axes):
            raise ValueError(f"values shape {self.values.shape} does not match axes")
        if not self.names:
            self.names = AXIS_NAMES[:len(self.axes)] if len(self.axes) <= 4 else ()

    @property
    def ndim(self):
        return len(self.axes)

    @property
    def shape(self):
        return self.values.shape

    def coords(self, i):
        return self.axes[i].coords

    def mesh(self):
        return np.meshgrid(*[a.coords for a in self.axes], indexing="ij")

    @property
    def cell_volume(self):
        return float(np.prod([a.h for a in self.axes]))

    def integrate(self, weight=None):
        v = self.values if weight is None else self.values * weight
        return v.sum() * self.cell_volume

    def mass(self):
        return float(np.real(self.integrate()))

    def moment(self, axis, order=1):
        c = self.mesh()[axis]
        return float(np.real(self.integrate(c ** order))) / self.mass()

    def marginal(self, keep):
        keep = tuple(sorted(keep))
        drop = tuple(i for i in range(self.ndim) if i not in keep)
        vol = float(np.prod([self.axes[i].h for i in drop]))
        vals = self.values.sum(axis=drop) * vol
        return GridFunction(tuple(self.axes[i] for i in keep), vals, self.t,
                            tuple(self.names[i] for i in keep) if self.names else ())

    def squeeze(self):
        keep = [i for i, a in enumerate(self.axes) if not a.collapsed]
        return GridFunction(tuple(self.axes[i] for i in keep),
                            self.values.reshape([self.axes[i].n for i in keep]), self.t,
                            tuple(self.names[i] for i in keep) if self.names else ())

    def min(self):
        return float(np.min(np.real(self.values)))

    def interpolate(self, points):
        from scipy.interpolate import RegularGridInterpolator

        g = self.squeeze()
        pts = np.atleast_2d(points)
        active = [i for i, a in enumerate(self.axes) if not a.collapsed]
        f = RegularGridInterpolator([a.coords for a in g.axes], g.values,
                                    bounds_error=False, fill_value=0.0)
        return f(pts[:, active])

    # persistence ------------------------------------------------------------
    _MAGIC = b"SQHOGRD1"

    def save(self, path):
        cplx = np.iscomplexobj(self.values)
        with open(path, "wb") as fh:
            fh.write(struct.pack("<8sII", self._MAGIC, self.ndim, int(cplx)))
            for a in self.axes:
                fh.write(struct.pack("<ddQ", a.lo, a.hi, a.n))
            fh.write(struct.pack("<d", self.t))
            fh.write(np.ascontiguousarray(self.values, "<c16" if cplx else "<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic, ndim, cplx = struct.unpack("<8sII", fh.read(16))
            if magic != cls._MAGIC:
                raise ValueError("not a grid function file")
            axes = [Axis(*struct.unpack("<ddQ", fh.read(24))) for _ in range(ndim)]
            (t,) = struct.unpack("<d", fh.read(8))
            dt = "<c16" if cplx else "<f8"
            vals = np.frombuffer(fh.read(), dtype=dt).reshape([a.n for a in axes]).copy()
        return cls(tuple(axes), vals, t)

    def slice_csv(self, path, axes=(0, 1), at=None):
        """Write a 2D slice (other axes at index ``at`` or the centre) as long-form CSV."""
        idx = []
        for i, a in enumerate(self.axes):
            if i in axes:
                idx.append(slice(None))
            else:
                idx.append(a.n // 2 if at is None else at[i])
        sl = np.real(self.values[tuple(idx)])
        ca, cb = self.coords(axes[0]), self.coords(axes[1])
        with open(path, "w") as fh:
            fh.write(f"{self.names[axes[0]]},{self.names[axes[1]]},value\n")
            for i, x in enumerate(ca):
                for j, y in enumerate(cb):
                    fh.write(f"{x!r},{y!r},{float(sl[i, j])!r}\n")


def make_axes(z1=None, z2=None, z3=None, z4=None):
    """Axes from (lo, hi, n) tuples or scalars (collapsed at that value)."""
    out = []
    for spec in (z1, z2, z3, z4):
        if spec is None:
            out.append(Axis.point(0.0))
        elif np.ndim(spec) == 0:
            out.append(Axis.point(spec))
        else:
            out.append(Axis(float(spec[0]), float(spec[1]), int(spec[2])))
    return tuple(out)


def delta_gaussian(axes, center, width_cells=2.0):
    """Discrete delta: normalized Gaussian of ``width_cells`` cells per active axis."""
    vals = np.ones([a.n for a in axes])
    for i, a in enumerate(axes):
        if a.collapsed:
            continue
        c = a.coords
        g = np.exp(-0.5 * ((c - center[i]) / (width_cells * a.h)) ** 2)
        shape = [1] * len(axes)
        shape[i] = a.n
        vals = vals * g.reshape(shape)
    gf = GridFunction(axes, vals)
    m = gf.mass()
    if m <= 0:
        raise FPError("delta centre lies outside the grid")
    gf.values = vals / m
    return gf


# ---------------------------------------------------------------------------
# forward operator kernels


@njit(cache=True, nogil=True)
def _rhs_nb(P, out, c0, c1, c2, c3, h, act, om2, f0, e1, e2, s):
    n0, n1, n2, n3 = P.shape
    h0, h1, h2, h3 = h[0], h[1], h[2], h[3]
    mixed = act[1] and act[2] and e1 != 0.0
    for i in range(n0):
        z1 = c0[i]
        K2 = f0 - om2 * z1
        D22 = e2 + e1 * z1 * z1
        for j in range(n1):
            z2 = c1[j]
            for k in range(n2):
                z3 = c2[k]
                for l in range(n3):
                    z4 = c3[l]
                    p = P[i, j, k, l]
                    acc = -s * z3 * p
                    if act[0]:
                        pp = P[i + 1, j, k, l] if i + 1 < n0 else 0.0
                        pm = P[i - 1, j, k, l] if i > 0 else 0.0
                        acc -= z2 * (pp - pm) / (2.0 * h0)
                    if act[1]:
                        pp = P[i, j + 1, k, l] if j + 1 < n1 else 0.0
                        pm = P[i, j - 1, k, l] if j > 0 else 0.0
                        acc += -K2 * (pp - pm) / (2.0 * h1) + D22 * (pp - 2.0 * p + pm) / (h1 * h1)
                    if act[2]:
                        pp = 0.0
                        pm = 0.0
                        if k + 1 < n2:
                            zp = c2[k + 1]
                            pp = (z4 * z4 - zp * zp - om2) * P[i, j, k + 1, l]
                        if k > 0:
                            zm = c2[k - 1]
                            pm = (z4 * z4 - zm * zm - om2) * P[i, j, k - 1, l]
                        acc -= (pp - pm) / (2.0 * h2)
                        qp = P[i, j, k + 1, l] if k + 1 < n2 else 0.0
                        qm = P[i, j, k - 1, l] if k > 0 else 0.0
                        acc += e1 * (qp - 2.0 * p + qm) / (h2 * h2)
                    if act[3]:
                        pp = -2.0 * z3 * c3[l + 1] * P[i, j, k, l + 1] if l + 1 < n3 else 0.0
                        pm = -2.0 * z3 * c3[l - 1] * P[i, j, k, l - 1] if l > 0 else 0.0
                        acc -= (pp - pm) / (2.0 * h3)
                    if mixed:
                        jp = j + 1 < n1
                        jm = j > 0
                        kp = k + 1 < n2
                        km = k > 0
                        cr = 0.0
                        if jp and kp:
                            cr += P[i, j + 1, k + 1, l]
                        if jp and km:
                            cr -= P[i, j + 1, k - 1, l]
                        if jm and kp:
                            cr -= P[i, j - 1, k + 1, l]
                        if jm and km:
                            cr += P[i, j - 1, k - 1, l]
                        acc += 2.0 * e1 * z1 * cr / (4.0 * h1 * h2)
                    out[i, j, k, l] = acc


# fourth-order central weights for offsets -2..2
_W1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_W2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


@njit(cache=True, nogil=True)
def _rhs4_nb(P, out, c0, c1, c2, c3, h, act, om2, f0, e1, e2, s):
    """Fourth-order variant of _rhs_nb (same flux form, 5-point stencils)."""
    n0, n1, n2, n3 = P.shape
    h0, h1, h2, h3 = h[0], h[1], h[2], h[3]
    mixed = act[1] and act[2] and e1 != 0.0
    # two ghost layers of zeros on every side replace the bounds checks
    Q = np.zeros((n0 + 4, n1 + 4, n2 + 4, n3 + 4))
    Q[2:n0 + 2, 2:n1 + 2, 2:n2 + 2, 2:n3 + 2] = P
    z3g = np.zeros(n2 + 4)
    z3g[2:n2 + 2] = c2
    z4g = np.zeros(n3 + 4)
    z4g[2:n3 + 2] = c3
    a1 = 8.0 / 12.0
    b1 = 1.0 / 12.0
    for i in range(n0):
        z1 = c0[i]
        K2 = f0 - om2 * z1
        D22 = e2 + e1 * z1 * z1
        I = i + 2
        for j in range(n1):
            z2 = c1[j]
            J = j + 2
            for k in range(n2):
                z3 = c2[k]
                K = k + 2
                for l in range(n3):
                    z4 = c3[l]
                    L = l + 2
                    p = Q[I, J, K, L]
                    acc = -s * z3 * p
                    if act[0]:
                        d = a1 * (Q[I + 1, J, K, L] - Q[I - 1, J, K, L]) \
                            - b1 * (Q[I + 2, J, K, L] - Q[I - 2, J, K, L])
                        acc -= z2 * d / h0
                    if act[1]:
                        qp1, qm1 = Q[I, J + 1, K, L], Q[I, J - 1, K, L]
                        qp2, qm2 = Q[I, J + 2, K, L], Q[I, J - 2, K, L]
                        d1 = a1 * (qp1 - qm1) - b1 * (qp2 - qm2)
                        d2 = (16.0 * (qp1 + qm1) - (qp2 + qm2) - 30.0 * p) / 12.0
                        acc += -K2 * d1 / h1 + D22 * d2 / (h1 * h1)
                    if act[2]:
                        zz = z4 * z4 - om2
                        fp1 = (zz - z3g[K + 1] ** 2) * Q[I, J, K + 1, L]
                        fm1 = (zz - z3g[K - 1] ** 2) * Q[I, J, K - 1, L]
                        fp2 = (zz - z3g[K + 2] ** 2) * Q[I, J, K + 2, L]
                        fm2 = (zz - z3g[K - 2] ** 2) * Q[I, J, K - 2, L]
                        acc -= (a1 * (fp1 - fm1) - b1 * (fp2 - fm2)) / h2
                        qp1, qm1 = Q[I, J, K + 1, L], Q[I, J, K - 1, L]
                        qp2, qm2 = Q[I, J, K + 2, L], Q[I, J, K - 2, L]
                        acc += e1 * (16.0 * (qp1 + qm1) - (qp2 + qm2) - 30.0 * p) / (12.0 * h2 * h2)
                    if act[3]:
                        fp1 = z4g[L + 1] * Q[I, J, K, L + 1]
                        fm1 = z4g[L - 1] * Q[I, J, K, L - 1]
                        fp2 = z4g[L + 2] * Q[I, J, K, L + 2]
                        fm2 = z4g[L - 2] * Q[I, J, K, L - 2]
                        acc += 2.0 * z3 * (a1 * (fp1 - fm1) - b1 * (fp2 - fm2)) / h3
                    if mixed:
                        cr = 0.0
                        for a in range(-2, 3):
                            if a == 0:
                                continue
                            wa = a1 if a == 1 else -a1 if a == -1 else -b1 if a == 2 else b1
                            row = a1 * (Q[I, J + a, K + 1, L] - Q[I, J + a, K - 1, L]) \
                                - b1 * (Q[I, J + a, K + 2, L] - Q[I, J + a, K - 2, L])
                            cr += wa * row
                        acc += 2.0 * e1 * z1 * cr / (h1 * h2)
                    out[i, j, k, l] = acc


def _shift(P, axis, d):
    """P evaluated at index + d along ``axis`` with zero extension."""
    out = np.zeros_like(P)
    n = P.shape[axis]
    src = [slice(None)] * 4
    dst = [slice(None)] * 4
    if d > 0:
        src[axis] = slice(d, n)
        dst[axis] = slice(0, n - d)
    else:
        src[axis] = slice(0, n + d)
        dst[axis] = slice(-d, n)
    out[tuple(dst)] = P[tuple(src)]
    return out



def _d1(F, axis, h, order):
    if order == 2:
        return (_shift(F, axis, 1) - _shift(F, axis, -1)) / (2 * h)
    return sum(w * _shift(F, axis, a) for a, w in zip(range(-2, 3), _W1) if w) / h


def _d2(F, axis, h, order):
    if order == 2:
        return (_shift(F, axis, 1) - 2 * F + _shift(F, axis, -1)) / h ** 2
    return sum(w * (_shift(F, axis, a) if a else F) for a, w in zip(range(-2, 3), _W2)) / h ** 2


def _rhs_np(P, out, c0, c1, c2, c3, h, act, om2, f0, e1, e2, s, order=2):
    Z1 = c0[:, None, None, None]
    Z2 = c1[None, :, None, None]
    Z3 = c2[None, None, :, None]
    Z4 = c3[None, None, None, :]
    acc = -s * Z3 * P
    if act[0]:
        acc = acc - Z2 * _d1(P, 0, h[0], order)
    if act[1]:
        acc = acc - (f0 - om2 * Z1) * _d1(P, 1, h[1], order) \
            + (e2 + e1 * Z1 * Z1) * _d2(P, 1, h[1], order)
    if act[2]:
        acc = acc - _d1((Z4 * Z4 - Z3 * Z3 - om2) * P, 2, h[2], order) \
            + e1 * _d2(P, 2, h[2], order)
    if act[3]:
        acc = acc - _d1(-2 * Z3 * Z4 * P, 3, h[3], order)
    if act[1] and act[2] and e1 != 0:
        acc = acc + 2 * e1 * Z1 * _d1(_d1(P, 2, h[2], order), 1, h[1], order)
    out[...] = acc


def _rhs4_np(P, out, *args):
    _rhs_np(P, out, *args, order=4)


# ---------------------------------------------------------------------------
# time evolution


@dataclass
class Coefficients:
    """Time-dependent coefficients of the forward operator."""

    om2: object  # callable t -> Omega0^2
    f0: object
    e1: object  # eps1 p1(t) Theta(t - t1)
    e2: object
    sink: float = 0.0
    breakpoints: tuple = ()

    @classmethod
    def from_config(cls, config: ScenarioConfig, noise=(True, True), sink=0.0):
        zero = lambda t: 0.0  # noqa: E731
        return cls(lambda t: float(config.omega_sq(t)), lambda t: float(config.force(t)),
                   (lambda t: float(config.diff1(t))) if noise[0] else zero,
                   (lambda t: float(config.diff2(t))) if noise[1] else zero,
                   float(sink), tuple(config.breakpoints()) + (config.t1, config.t2))

    @classmethod
    def constant(cls, om2, f0=0.0, e1=0.0, e2=0.0, sink=0.0):
        return cls(lambda t: om2, lambda t: f0, lambda t: e1, lambda t: e2, float(sink))

    def at(self, t):
        return self.om2(t), self.f0(t), self.e1(t), self.e2(t)


@dataclass
class FPResult:
    series: list  # GridFunctions at the recorded times
    times: np.ndarray
    mass: np.ndarray  # mass at each recorded time
    mass0: float
    n_steps: int
    dt_max: float
    min_value: float
    meta: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.series[-1]


def _rate_bound(axes, om2, f0, e1, e2, s):
    c = [a.coords for a in axes]
    act = [not a.collapsed for a in axes]
    h = [a.h for a in axes]
    z1, z2, z3, z4 = (np.max(np.abs(ci)) for ci in c)
    lam = abs(s) * z3
    if act[0]:
        lam += z2 / h[0]
    if act[1]:
        lam += (abs(f0) + abs(om2) * z1) / h[1] + 4 * (e2 + e1 * z1 * z1) / h[1] ** 2
    if act[2]:
        lam += (z4 * z4 + z3 * z3 + abs(om2)) / h[2] + 4 * e1 / h[2] ** 2 + 2 * z3
    if act[3]:
        lam += 2 * z3 * z4 / h[3] + 2 * z3
    if act[1] and act[2]:
        lam += 2 * e1 * z1 / (h[1] * h[2])
    return lam


def _validate_collapsed(axes, coeffs, t0, t1):
    ts = np.linspace(t0, t1, 33)
    c = np.array([coeffs.at(t) for t in ts])
    if axes[0].collapsed != axes[1].collapsed or axes[2].collapsed != axes[3].collapsed:
        raise FPError("axes collapse in pairs: (z1, z2) and (z3, z4)")
    if axes[0].collapsed:
        if axes[0].lo != 0 or axes[1].lo != 0:
            raise FPError("(z1, z2) can only collapse at the origin")
        if np.any(c[:, 1] != 0) or np.any(c[:, 3] != 0):
            raise FPError("(z1, z2) collapse needs F0 = 0 and no force noise on the span")
    if axes[2].collapsed:
        if np.any(c[:, 2] != 0) or coeffs.sink != 0:
            raise FPError("(z3, z4) collapse needs eps1 = 0 and no sink on the span")


def evolve(start: GridFunction, coeffs: Coefficients, t0: float, t1: float,
           record_times=(), dt: float | None = None, cfl: float = 0.9,
           leak_tol: float | None = 1e-4, order: int = 2) -> FPResult:
    """Explicit RK4 (method of lines) on the central flux-form operator.

    ``order`` selects 3-point (2) or 5-point (4) central stencils.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    axes = start.axes
    if len(axes) != 4:
        raise FPError("evolve works on 4-axis grids (collapse unused axes)")
    _validate_collapsed(axes, coeffs, t0, t1)
    c = [np.ascontiguousarray(a.coords, float) for a in axes]
    h = np.array([a.h for a in axes])
    act = np.array([not a.collapsed for a in axes])
    ts = np.linspace(t0, t1, 17)
    lam = max(_rate_bound(axes, *coeffs.at(t), coeffs.sink) for t in ts)
    if order == 4:
        lam *= 1.4  # spectral radius of the 5-point stencils vs the 3-point ones
    dt_max = cfl * 2.8 / lam if lam > 0 else t1 - t0
    if dt is not None and dt > dt_max:
        raise CFLError(f"dt={dt:.3e} exceeds the stability bound {dt_max:.3e}")
    step = dt or dt_max
    if order == 2:
        kern = _rhs_nb if use_numba() else _rhs_np
    else:
        kern = _rhs4_nb if use_numba() else _rhs4_np
    P = np.ascontiguousarray(start.values, float).copy()
    k1, k2, k3, k4, tmp = (np.empty_like(P) for _ in range(5))
    vol = start.cell_volume
    mass0 = P.sum() * vol
    stops = sorted({t for t in (*record_times, *coeffs.breakpoints) if t0 < t < t1} | {t1})
    rec = set(float(t) for t in record_times if t0 < t <= t1) | {t1}
    series, times, masses = [], [], []
    if t0 in set(record_times):
        series.append(GridFunction(axes, P.copy(), t0, start.names))
        times.append(t0)
        masses.append(mass0)
    nsteps = 0
    pmin = P.min()
    ta = t0
    for tb in stops:
        n = max(int(math.ceil((tb - ta) / step - 1e-12)), 1)
        hh = (tb - ta) / n
        for m in range(n):
            t = ta + m * hh
            a = coeffs.at(t)
            b = coeffs.at(t + 0.5 * hh)
            e = coeffs.at(t + hh)
            s = coeffs.sink
            kern(P, k1, *c, h, act, *a, s)
            np.multiply(k1, 0.5 * hh, out=tmp)
            tmp += P
            kern(tmp, k2, *c, h, act, *b, s)
            np.multiply(k2, 0.5 * hh, out=tmp)
            tmp += P
            kern(tmp, k3, *c, h, act, *b, s)
            np.multiply(k3, hh, out=tmp)
            tmp += P
            kern(tmp, k4, *c, h, act, *e, s)
            k2 += k3
            k2 *= 2.0
            k1 += k2
            k1 += k4
            k1 *= hh / 6.0
            P += k1
            nsteps += 1
        pmin = min(pmin, P.min())
        if not np.all(np.isfinite(P)):
            raise CFLError("non-finite values: step unstable")
        ta = tb
        if tb in rec:
            series.append(GridFunction(axes, P.copy(), tb, start.names))
            times.append(tb)
            masses.append(P.sum() * vol)
    masses = np.array(masses)
    if leak_tol is not None and coeffs.sink == 0:
        leak = abs(masses[-1] - mass0) / abs(mass0)
        if leak > leak_tol:
            raise MassLeakageError(f"relative mass change {leak:.2e} through the boundary "
                                   f"(limit {leak_tol:.0e}); enlarge the domain")
    return FPResult(series, np.array(times), masses, mass0, nsteps, dt_max, float(pmin))


def forward_rhs(gf: GridFunction, coeffs: Coefficients, t: float, order: int = 2) -> GridFunction:
    """Apply the forward operator once (diagnostics, adjoint checks)."""
    c = [np.ascontiguousarray(a.coords, float) for a in gf.axes]
    h = np.array([a.h for a in gf.axes])
    act = np.array([not a.collapsed for a in gf.axes])
    out = np.empty(gf.shape)
    if order == 2:
        kern = _rhs_nb if use_numba() else _rhs_np
    else:
        kern = _rhs4_nb if use_numba() else _rhs4_np
    kern(np.ascontiguousarray(gf.values, float), out, *c, h, act, *coeffs.at(t), coeffs.sink)
    return GridFunction(gf.axes, out, t, gf.names)


# ---------------------------------------------------------------------------
# force-noise-only Gaussian solution


def p1_moments(config: ScenarioConfig, solution: ClassicalSolution, t):
    """Mean (eta0, eta0') and the b-integrals at time ``t`` (> t2)."""
    t2 = config.t2
    wi = config.omega_in
    if t <= t2:
        s = solution.state(t)
        return np.array([s["eta"], s["deta"]]), np.zeros(3)

    def rhs(tt, _):
        s = solution.state(tt)
        x1, x2 = s["xi"].real, s["xi"].imag
        e = float(config.diff2(tt)) if tt > t2 else 0.0
        return [e * x1 * x1, -2 * e * x1 * x2, e * x2 * x2]

    edges = [t2] + [b for b in config.breakpoints() if t2 < b < t] + [t]
    b = np.zeros(3)
    for a, c in zip(edges[:-1], edges[1:]):
        r = solve_ivp(rhs, (a, c), b, method="DOP853", rtol=1e-11, atol=1e-14)
        b = r.y[:, -1]
    b = b / wi ** 2
    s = solution.state(t)
    return np.array([s["eta"], s["deta"]]), b


def p1_covariance(config, solution, t):
    """Covariance of (x1, x2) implied by the Gaussian P1."""
    mean, (b1, b2, b3) = p1_moments(config, solution, t)
    s = solution.state(t)
    wi = config.omega_in
    x1, x2 = s["xi"].real, s["xi"].imag
    v1, v2 = s["dxi"].real, s["dxi"].imag
    # y = M (x - mean); cov_y = [[2 b1, b2], [b2, 2 b3]]
    M = np.array([[-v1, x1], [v2, -x2]]) / wi
    Mi = np.linalg.inv(M)
    cy = np.array([[2 * b1, b2], [b2, 2 * b3]])
    return mean, Mi @ cy @ Mi.T


def analytic_P1(config: ScenarioConfig, solution: ClassicalSolution | None = None,
                t: float = 0.0, axes=None, n: int = 256, span: float = 6.0) -> GridFunction:
    """Closed-form Gaussian density of (eta, eta') under force noise only."""
    if config.eps1 != 0:
        raise FPError("analytic P1 requires eps1 = 0")
    sol = solution or solve_classical(config)
    mean, (b1, b2, b3) = p1_moments(config, sol, t)
    det = 4 * b1 * b3 - b2 * b2
    scale = max(b1, b3, 1e-300)
    if det <= 1e-14 * scale * scale or t <= config.t2:
        raise DegenerateCovariance(
            f"4 b1 b3 - b2^2 = {det:.3e} at t = {t}: delta limit at ({mean[0]}, {mean[1]})")
    if axes is None:
        _, cov = p1_covariance(config, sol, t)
        sd = np.sqrt(np.diag(cov))
        axes = make_axes((mean[0] - span * sd[0], mean[0] + span * sd[0], n),
                         (mean[1] - span * sd[1], mean[1] + span * sd[1], n))
    gf = GridFunction(axes, np.zeros([a.n for a in axes]), t)
    gf.values = p1_density(config, sol, t, *gf.mesh()[:2], b=(b1, b2, b3), mean=mean)
    return gf


def p1_density(config, solution, t, x1, x2, b=None, mean=None):
    if b is None or mean is None:
        mean, b = p1_moments(config, solution, t)
    b1, b2, b3 = b
    wi = config.omega_in
    s = solution.state(t)
    X1, X2 = s["xi"].real, s["xi"].imag
    V1, V2 = s["dxi"].real, s["dxi"].imag
    d1 = np.asarray(x1) - mean[0]
    d2 = np.asarray(x2) - mean[1]
    y1 = -(V1 * d1 - X1 * d2) / wi
    y2 = (V2 * d1 - X2 * d2) / wi
    det = 4 * b1 * b3 - b2 * b2
    return det ** -0.5 / (2 * np.pi * wi) * np.exp(-(b3 * y1 * y1 + b1 * y2 * y2 - b2 * y1 * y2) / det)


def solve_fp2d(config: ScenarioConfig, t_span, axes=None, start: GridFunction | None = None,
               record_times=(), solution=None, n: int = 128, **kw) -> FPResult:
    """Force-noise-only density of (eta, eta') on a 2D grid."""
    if config.eps1 != 0:
        raise FPError("the 2D equation requires eps1 = 0")
    t0, t1 = t_span
    sol = solution or solve_classical(config)
    if axes is None:
        mean, cov = p1_covariance(config, sol, t1) if t1 > config.t2 else (None, None)
        s = sol.state(np.linspace(t0, t1, 64))
        r1 = np.max(np.abs(s["eta"]))
        r2 = np.max(np.abs(s["deta"]))
        sd = np.sqrt(np.diag(cov)) if cov is not None else np.ones(2)
        axes = make_axes((-r1 - 6 * sd[0], r1 + 6 * sd[0], n), (-r2 - 6 * sd[1], r2 + 6 * sd[1], n))
    if len(axes) == 2:
        axes = (*axes, Axis.point(0.0), Axis.point(0.0))
    if start is None:
        s = sol.state(t0)
        start = delta_gaussian(axes, (s["eta"], s["deta"], 0.0, 0.0))
    elif start.ndim == 2:
        start = GridFunction(axes, start.values[:, :, None, None], start.t)
    coeffs = Coefficients.from_config(config, noise=(False, True))
    return evolve(start, coeffs, t0, t1, record_times, **kw)


def default_axes4(config: ScenarioConfig, n=32, sigma_max=1.0, collapse_force=None):
    """Default bounded domain: |z1| <= 6 s, |z2| <= 6 W s, z3 in [-8W, 8W], z4 in [0.1W, 4W]."""
    w = config.omega_in
    if collapse_force is None:
        collapse_force = config.eps2 == 0 and config.f0.kind == "constant" and config.f0.value == 0
    z1 = 0.0 if collapse_force else (-6 * sigma_max, 6 * sigma_max, n)
    z2 = 0.0 if collapse_force else (-6 * w * sigma_max, 6 * w * sigma_max, n)
    return make_axes(z1, z2, (-8 * w, 8 * w, n), (0.1 * w, 4 * w, n))


def solve_fp4d(config: ScenarioConfig, t_span, axes=None, sink: float = 0.0,
               start: GridFunction | None = None, record_times=(), solution=None,
               noise=(True, True), **kw) -> FPResult:
    """Joint density of (z1..z4), optionally with the sink -p z3 Q."""
    t0, t1 = t_span
    sol = solution or solve_classical(config)
    axes = axes or default_axes4(config)
    if start is None:
        s = sol.state(t0)
        phi = s["dxi"] / s["xi"]
        center = [s["eta"], s["deta"], phi.real, phi.imag]
        center = [a.lo if a.collapsed else c for a, c in zip(axes, center)]
        start = delta_gaussian(axes, center)
    coeffs = Coefficients.from_config(config, noise=noise, sink=sink)
    return evolve(start, coeffs, t0, t1, record_times, **kw)


# ---------------------------------------------------------------------------
# sparse operators (time-independent coefficients)


def backward_generator(axes, om2, f0=0.0, e1=0.0, e2=0.0, upwind=False):
    """Backward generator K.grad + D:grad^2 on the flattened grid (zero outside).

    Its transpose is the conservative forward operator; with ``upwind=False``
    the transpose coincides with the central kernel used by ``evolve``.
    """
    shape = tuple(a.n for a in axes)
    N = int(np.prod(shape))
    idx = np.arange(N).reshape(shape)
    Z = np.meshgrid(*[a.coords for a in axes], indexing="ij")
    h = [a.h for a in axes]
    K = [Z[1] + 0 * Z[0], f0 - om2 * Z[0] + 0 * Z[1], Z[3] ** 2 - Z[2] ** 2 - om2,
         -2 * Z[2] * Z[3]]
    D = [0 * Z[0], e2 + e1 * Z[0] ** 2 + 0 * Z[1], e1 + 0 * Z[2], 0 * Z[3]]
    rows, cols, vals = [], [], []

    def add(axis_offsets, coef):
        sl_src = [slice(None)] * 4
        sl_dst = [slice(None)] * 4
        for ax, d in axis_offsets:
            n = shape[ax]
            if d > 0:
                sl_src[ax] = slice(0, n - d)
                sl_dst[ax] = slice(d, n)
            elif d < 0:
                sl_src[ax] = slice(-d, n)
                sl_dst[ax] = slice(0, n + d)
        r = idx[tuple(sl_src)].ravel()
        c = idx[tuple(sl_dst)].ravel()
        v = np.broadcast_to(coef, shape)[tuple(sl_src)].ravel()
        m = v != 0
        rows.append(r[m])
        cols.append(c[m])
        vals.append(v[m])

    diag = np.zeros(shape)
    for a in range(4):
        if axes[a].collapsed:
            continue
        k, d = K[a], D[a]
        if upwind:
            add([(a, 1)], np.maximum(k, 0) / h[a] + d / h[a] ** 2)
            add([(a, -1)], -np.minimum(k, 0) / h[a] + d / h[a] ** 2)
            diag -= np.abs(k) / h[a]
        else:
            add([(a, 1)], k / (2 * h[a]) + d / h[a] ** 2)
            add([(a, -1)], -k / (2 * h[a]) + d / h[a] ** 2)
        diag -= 2 * d / h[a] ** 2
    if not axes[1].collapsed and not axes[2].collapsed and e1 != 0:
        cm = 2 * e1 * Z[0] / (4 * h[1] * h[2])
        for d1, d2, sg in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
            add([(1, d1), (2, d2)], sg * cm)
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N, N))


def sink_diagonal(axes, p):
    Z = np.meshgrid(*[a.coords for a in axes], indexing="ij")
    return sp.diags((p * Z[2]).ravel())


def forward_operator(axes, om2, f0=0.0, e1=0.0, e2=0.0, sink=0.0, upwind=False):
    return (backward_generator(axes, om2, f0, e1, e2, upwind).T - sink_diagonal(axes, sink)).tocsr()


def evolve_sparse(Q0: GridFunction, A, t0, t1, dt, free=None, record_every=0):
    """Crank-Nicolson for dQ/dt = A Q on the nodes in ``free`` (others held at 0)."""
    N = A.shape[0]
    free = np.ones(N, bool) if free is None else np.asarray(free, bool).ravel()
    Af = A[free][:, free].tocsc()
    n = max(int(math.ceil((t1 - t0) / dt - 1e-12)), 1)
    hh = (t1 - t0) / n
    I = sp.identity(Af.shape[0], format="csc")
    lu = spla.splu((I - 0.5 * hh * Af).tocsc())
    B = (I + 0.5 * hh * Af).tocsr()
    q = np.asarray(Q0.values, float).ravel()[free].copy()
    out_t, out_q = [t0], [q.copy()]
    for m in range(n):
        q = lu.solve(B @ q)
        if (record_every and (m + 1) % record_every == 0) or m == n - 1:
            out_t.append(t0 + (m + 1) * hh)
            out_q.append(q.copy())
    series = []
    for t, v in zip(out_t, out_q):
        full = np.zeros(N)
        full[free] = v
        series.append(GridFunction(Q0.axes, full.reshape(Q0.shape), t, Q0.names))
    return series


# ---------------------------------------------------------------------------
# stationary and conjugate problems


@dataclass
class StationarySolution:
    q: GridFunction
    residual: float  # relative L2 residual of the defining operator
    eigenvalue: float | None = None
    equation: str = ""
    meta: dict = field(default_factory=dict)


def solve_line_stationary(eps: float, omega: float, p: int = 1, L: float = 60.0, n: int = 4001,
               rtol: float = 1e-10):
    """Decaying solution of eps q'' + (u^2 + W^2) q' + (2 - p) u q = 0.

    Integrated from -L with the algebraic branch (u^2 + W^2)^{-(2-p)/2}; the
    other branch grows like exp(|u|^3 / 3 eps) towards -infinity and is
    suppressed by shooting left to right.
    """
    if eps <= 0:
        raise StationarySolveError("stationary equation needs eps1 > 0")
    a = (2 - p) / 2.0
    if a <= 0:
        raise StationarySolveError(
            f"no decaying solution for p = {p}: the algebraic branch grows like |u|^{-2 * a:g}")
    w2 = omega * omega
    u0 = -L
    q0 = (u0 * u0 + w2) ** (-a)
    dq0 = -a * 2 * u0 * (u0 * u0 + w2) ** (-a - 1)

    def f(u, y):
        return [y[1], -((u * u + w2) * y[1] + (2 - p) * u * y[0]) / eps]

    u = np.linspace(-L, L, n)
    s = solve_ivp(f, (-L, L), [q0, dq0], method="LSODA", rtol=rtol, atol=1e-14 * q0,
                  t_eval=u, dense_output=True)
    if not s.success:
        raise StationarySolveError(s.message)
    q = s.y[0]
    # residual from the dense interpolant, second derivative by differencing q'
    ui = u[2:-2]
    du = 1e-4 * max(1.0, omega)
    qi, dq = s.sol(ui)
    d2 = (s.sol(ui + du)[1] - s.sol(ui - du)[1]) / (2 * du)
    res = eps * d2 + (ui * ui + w2) * dq + (2 - p) * ui * qi
    rel = float(np.linalg.norm(res) / np.linalg.norm((ui * ui + w2) * dq))
    gf = GridFunction((Axis(-L, L, n),), q, names=("u3",))
    return StationarySolution(gf, rel, None, "line", {"dense": s.sol, "p": p, "eps": eps,
                                                       "omega": omega})


def solve_stationary(equation: str, eps1: float, omega_out: float, p: int = 1,
                     eps2: float = 0.0, f0: float = 0.0, axes=None, tol: float = 1e-6,
                     L: float = 60.0, n: int = 4001) -> StationarySolution:
    """Decaying solution of the shortened stationary equation.

    ``"line"`` and the (z1, z2)-collapsed forms of ``"shortened"`` and
    ``"shortened_general"`` (F0 = 0, eps2 = 0, so the solution is
    delta(z1) delta(z2) g(z3)) reduce to the 1D problem solved by shooting.  Otherwise the 3D equation is discretized on
    ``axes`` and the eigenvector nearest zero is taken (shift-invert).
    """
    if equation not in ("line", "shortened", "shortened_general"):
        raise ValueError(f"unknown stationary equation {equation!r}")
    if equation == "line" or (f0 == 0 and eps2 == 0):
        return solve_line_stationary(eps1, omega_out, p, L, n)
    if axes is None:
        raise StationarySolveError("3D stationary solve needs explicit axes")
    ax = (axes[0], axes[1], axes[2], Axis.point(0.0))
    # shortened operator: the z4 = 0 slice of the forward operator
    A = forward_operator(ax, omega_out ** 2, f0, eps1, eps2, p)
    vals, vecs = spla.eigs(A.tocsc(), k=1, sigma=0.0)
    lam = float(np.real(vals[0]))
    v = np.real(vecs[:, 0])
    v = v / v[np.argmax(np.abs(v))]
    res = float(np.linalg.norm(A @ v) / np.linalg.norm(v))
    gf = GridFunction(axes[:3], v.reshape([a.n for a in axes[:3]]), names=AXIS_NAMES[:3])
    sol = StationarySolution(gf, res, lam, equation)
    if res > tol * max(1.0, np.abs(A).max()):
        raise StationarySolveError(
            f"no decaying stationary solution on this domain: nearest eigenvalue {lam:.3e}, "
            f"residual {res:.3e}")
    return sol


def conjugate_far_field(u3, u4, omega, p):
    """|Phi + i W|^{-p}: the exact conjugate solution without noise."""
    return ((np.asarray(u4) + omega) ** 2 + np.asarray(u3) ** 2) ** (-p / 2.0)


def conjugate_axes(omega, n3=321, n4=161, L=8.0, U=4.0):
    return (Axis(-L * omega, L * omega, n3), Axis(0.0, U * omega, n4))


def solve_conjugate(equation: str, eps1: float, omega: float, p: int = 1, axes=None,
                    method: str = "bvp", scheme: str = "upwind") -> StationarySolution:
    """Conjugate stationary solution Y(u3, u4).

    The conjugate operator acting on functions of (u3, u4) alone closes (the
    z1, z2 derivatives drop out), and the far-field data are independent of
    (u1, u2), so Y does not depend on (u1, u2) for any of the three equations.

    ``method="bvp"``: Dirichlet data |Phi + i W|^{-p} on u3 = +-L and u4 = U,
    the u4 = 0 line kept as an interior row (K4 vanishes there).  ``scheme``
    selects upwind (monotone) or central advection; the central matrix is the
    exact transpose of the forward operator used for Q, which makes the
    pairing int Y Q time invariant up to boundary flux.  ``method="eigen"``: eigenvector nearest 0
    (shift-invert) with zero boundary data.
    """
    if equation not in ("conjugate", "conjugate_general", "conjugate_energy"):
        raise ValueError(f"unknown conjugate equation {equation!r}")
    a3, a4 = axes or conjugate_axes(omega)
    ax = (Axis.point(0.0), Axis.point(0.0), a3, a4)
    if scheme not in ("upwind", "central"):
        raise ValueError(f"unknown scheme {scheme!r}")
    G = backward_generator(ax, omega * omega, 0.0, eps1, 0.0, upwind=scheme == "upwind")
    M = (G - sink_diagonal(ax, p)).tolil()
    U3, U4 = np.meshgrid(a3.coords, a4.coords, indexing="ij")
    bnd = np.zeros(U3.shape, bool)
    bnd[0, :] = bnd[-1, :] = True
    bnd[:, -1] = True
    if a4.lo > 0:
        bnd[:, 0] = True
    flat = bnd.ravel()
    if method == "bvp":
        Y0 = conjugate_far_field(U3, U4, omega, p).ravel()
        M = M.tocsr()
        keep = sp.diags((~flat).astype(float))
        Mb = (keep @ M + sp.diags(flat.astype(float))).tocsc()
        rhs = np.where(flat, Y0, 0.0)
        y = spla.spsolve(Mb, rhs)
        res = float(np.linalg.norm((M @ y)[~flat]) / np.linalg.norm(y))
        gf = GridFunction((a3, a4), y.reshape(U3.shape), names=("u3", "u4"))
        return StationarySolution(gf, res, 0.0, equation,
                                  {"method": method, "boundary": bnd, "p": p, "eps": eps1,
                                   "omega": omega, "scheme": scheme})
    if method == "eigen":
        free = ~flat
        Mf = M.tocsr()[free][:, free].tocsc()
        vals, vecs = spla.eigs(Mf, k=1, sigma=0.0)
        y = np.zeros(flat.size)
        y[free] = np.real(vecs[:, 0])
        y /= y[np.argmax(np.abs(y))]
        lam = float(np.real(vals[0]))
        gf = GridFunction((a3, a4), y.reshape(U3.shape), names=("u3", "u4"))
        return StationarySolution(gf, abs(lam), lam, equation, {"method": method, "boundary": bnd, "p": p,
                                                     "omega": omega})
    raise ValueError(f"unknown method {method!r}")


def line_values(Y: StationarySolution, u3, omega=None):
    """Y(u3, 0), continued outside the solved box by the far-field data
    rescaled to match Y at the box edge (keeps C homogeneous in Y)."""
    g = Y.q
    a3 = g.axes[0]
    line = g.values[:, 0]
    u3 = np.asarray(u3, float)
    y = np.interp(u3, a3.coords, line)
    lo, hi = u3 < a3.lo, u3 > a3.hi
    if np.any(lo | hi):
        om = omega if omega is not None else Y.meta.get("omega", 1.0)
        p = Y.meta.get("p", 1)
        far = conjugate_far_field(u3, 0.0, om, p)
        s_lo = line[0] / conjugate_far_field(a3.lo, 0.0, om, p)
        s_hi = line[-1] / conjugate_far_field(a3.hi, 0.0, om, p)
        y = np.where(lo, s_lo * far, np.where(hi, s_hi * far, y))
    return y


def point_value(Y: StationarySolution, u3, u4):
    from scipy.interpolate import RegularGridInterpolator

    g = Y.q
    f = RegularGridInterpolator([a.coords for a in g.axes], g.values)
    return float(f([[u3, u4]])[0])


def normalization_constant(q: StationarySolution | GridFunction, Y: StationarySolution,
                           u0, omega: float, min_den: float = 1e-12) -> float:
    """C = Y(u0) / int Y(u3, 0) q(u) du over the shortened variables."""
    gq = q.q if isinstance(q, StationarySolution) else q
    if gq.ndim == 1:
        u3 = gq.coords(0)
        m = gq.values
    else:
        m3 = gq.marginal((2,)) if gq.ndim == 3 else gq.marginal((gq.ndim - 1,))
        u3, m = m3.coords(0), m3.values
    den = trapezoid(line_values(Y, u3, omega) * m, u3)
    if abs(den) < min_den:
        raise StationarySolveError(f"normalization denominator {den:.3e} vanishes")
    return point_value(Y, u0[-2], u0[-1]) / den


def pairing_series(Y: StationarySolution, t_span, dt: float, record_every: int,
                   start: GridFunction | None = None):
    """Evolve Q under the constant-coefficient sink equation matching ``Y`` and
    return (times, int Y Q).

    Q uses the central forward operator (Crank-Nicolson), the transpose of
    the central conjugate discretization.
    """
    a3, a4 = Y.q.axes
    om = Y.meta["omega"]
    ax = (Axis.point(0.0), Axis.point(0.0), a3, a4)
    A = forward_operator(ax, om * om, 0.0, Y.meta["eps"], 0.0, Y.meta["p"])
    if start is None:
        start = delta_gaussian(ax, (0.0, 0.0, 0.0, om))
    q0 = GridFunction((a3, a4), start.values.reshape(a3.n, a4.n), t_span[0])
    series = evolve_sparse(q0, A, t_span[0], t_span[1], dt, record_every=record_every)
    y = Y.q.values
    return np.array([g.t for g in series]), np.array([float(np.sum(y * g.values)) for g in series])
