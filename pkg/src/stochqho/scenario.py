"""Problem definition: time profiles, scenario configuration and validation.

Units are hbar = m = 1.  The Hamiltonian is

    H = -1/2 d^2/dx^2 + 1/2 Omega^2(t) x^2 - F(t) x,
    Omega^2(t) = Omega0^2(t) + sqrt(2 eps1 p1(t)) f1(t),
    F(t)       = F0(t) + sqrt(2 eps2 p2(t)) f2(t),

with f1, f2 independent white noises switched on at t1 and t2.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

PROFILE_KINDS = ("constant", "step", "window", "ramp", "pulse", "tabulated")
ASYMPTOTIC_TOL = 1e-10


class ProfileRangeError(ValueError):
    """Raised when a tabulated profile is evaluated outside its table."""


@dataclass(frozen=True)
class TimeProfile:
    """Scalar function of time.

    kinds
        constant   value
        step       before for t <= t0, after for t > t0
        window     value on (t_on, t_off), 0 elsewhere
        ramp       cubic smoothstep from before (t <= t0) to after (t >= t1)
        pulse      amplitude * exp(-((t - t0)/tau)^2)
        tabulated  piecewise-linear through (times, values)
    """

    kind: str = "constant"
    value: float = 0.0
    t0: float = 0.0
    t1: float = 1.0
    before: float = 0.0
    after: float = 0.0
    tau: float = 1.0
    times: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.kind == "ramp" and not self.t1 > self.t0:
            raise ValueError("ramp needs t1 > t0")
        if self.kind == "window" and not self.t1 > self.t0:
            raise ValueError("window needs t_off > t_on")
        if self.kind == "pulse" and not self.tau > 0:
            raise ValueError("pulse width must be positive")
        if self.kind == "tabulated":
            t = np.asarray(self.times, float)
            if t.ndim != 1 or len(t) < 2 or len(t) != len(self.values):
                raise ValueError("tabulated profile needs >= 2 matching (time, value) pairs")
            if np.any(np.diff(t) <= 0):
                raise ValueError("tabulated times must be strictly increasing")
            object.__setattr__(self, "times", tuple(float(x) for x in t))
            object.__setattr__(self, "values", tuple(float(x) for x in self.values))

    # constructors -----------------------------------------------------------
    @classmethod
    def constant(cls, value):
        return cls("constant", value=float(value))

    @classmethod
    def step(cls, t0, before, after):
        return cls("step", t0=float(t0), before=float(before), after=float(after))

    @classmethod
    def window(cls, t_on, t_off, value=1.0):
        return cls("window", t0=float(t_on), t1=float(t_off), value=float(value))

    @classmethod
    def ramp(cls, t0, t1, before, after):
        return cls("ramp", t0=float(t0), t1=float(t1), before=float(before), after=float(after))

    @classmethod
    def pulse(cls, amplitude, t0, tau):
        return cls("pulse", value=float(amplitude), t0=float(t0), tau=float(tau))

    @classmethod
    def tabulated(cls, times, values):
        return cls("tabulated", times=tuple(times), values=tuple(values))

    # evaluation ---------------------------------------------------------------
    def __call__(self, t):
        return evaluate_profile(self, t)

    def breakpoints(self):
        """Times where the profile is not smooth (integrators restart there)."""
        if self.kind in ("step",):
            return (self.t0,)
        if self.kind in ("window", "ramp"):
            return (self.t0, self.t1)
        if self.kind == "tabulated":
            return self.times
        return ()

    def to_dict(self):
        d = {"kind": self.kind}
        keys = {
            "constant": ("value",),
            "step": ("t0", "before", "after"),
            "window": ("t0", "t1", "value"),
            "ramp": ("t0", "t1", "before", "after"),
            "pulse": ("value", "t0", "tau"),
            "tabulated": ("times", "values"),
        }[self.kind]
        for k in keys:
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", "constant")
        # friendlier aliases used in config files
        if "t_on" in d:
            d["t0"] = d.pop("t_on")
        if "t_off" in d:
            d["t1"] = d.pop("t_off")
        if "amplitude" in d:
            d["value"] = d.pop("amplitude")
        if kind == "window":
            d.setdefault("value", 1.0)  # same default as TimeProfile.window
        for k in ("times", "values"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(kind=kind, **d)


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def evaluate_profile(profile: TimeProfile, t):
    """Evaluate ``profile`` at scalar or array ``t``."""
    ta = np.asarray(t, dtype=float)
    k = profile.kind
    if k == "constant":
        out = np.full(ta.shape, profile.value)
    elif k == "step":
        out = np.where(ta > profile.t0, profile.after, profile.before)
    elif k == "window":
        out = np.where((ta > profile.t0) & (ta < profile.t1), profile.value, 0.0)
    elif k == "ramp":
        s = (ta - profile.t0) / (profile.t1 - profile.t0)
        out = profile.before + (profile.after - profile.before) * _smoothstep(s)
    elif k == "pulse":
        out = profile.value * np.exp(-(((ta - profile.t0) / profile.tau) ** 2))
    else:
        tt = np.asarray(profile.times)
        if np.any(ta < tt[0] - 1e-12) or np.any(ta > tt[-1] + 1e-12):
            raise ProfileRangeError(
                f"t outside tabulated range [{tt[0]}, {tt[-1]}]")
        out = np.interp(ta, tt, np.asarray(profile.values))
    if np.ndim(t) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete problem instance.  Immutable; share freely between workers."""

    omega_in: float = 1.0
    omega_out: float = 1.0
    omega0_sq: TimeProfile = field(default_factory=lambda: TimeProfile.constant(1.0))
    f0: TimeProfile = field(default_factory=lambda: TimeProfile.constant(0.0))
    p1: TimeProfile = field(default_factory=lambda: TimeProfile.constant(0.0))
    p2: TimeProfile = field(default_factory=lambda: TimeProfile.constant(0.0))
    eps1: float = 0.0
    eps2: float = 0.0
    t1: float = 0.0
    t2: float = 0.0
    t_e: float | None = None
    t_min: float = -10.0
    t_max: float = 10.0
    seed: int = 0
    n_max: int = 32

    # noise amplitudes ---------------------------------------------------------
    def noise_amp1(self, t):
        """sqrt(2 eps1 p1(t)) Theta(t - t1)."""
        return self._amp(self.eps1, self.p1, self.t1, t)

    def noise_amp2(self, t):
        """sqrt(2 eps2 p2(t)) Theta(t - t2)."""
        return self._amp(self.eps2, self.p2, self.t2, t)

    def diff1(self, t):
        """eps1 p1(t) Theta(t - t1): diffusion strength of the frequency noise."""
        return 0.5 * np.asarray(self.noise_amp1(t)) ** 2

    def diff2(self, t):
        return 0.5 * np.asarray(self.noise_amp2(t)) ** 2

    @staticmethod
    def _amp(eps, prof, ti, t):
        ta = np.asarray(t, float)
        if eps == 0.0:
            out = np.zeros(ta.shape)
        else:
            p = np.clip(np.asarray(evaluate_profile(prof, ta)), 0.0, None)
            out = np.where(ta > ti, np.sqrt(2.0 * eps * p), 0.0)
        return float(out) if np.ndim(t) == 0 else out

    def omega_sq(self, t):
        return evaluate_profile(self.omega0_sq, t)

    def force(self, t):
        return evaluate_profile(self.f0, t)

    def breakpoints(self):
        pts = set()
        for prof in (self.omega0_sq, self.f0, self.p1, self.p2):
            pts.update(prof.breakpoints())
        if self.eps1 > 0:
            pts.add(self.t1)
        if self.eps2 > 0:
            pts.add(self.t2)
        return tuple(sorted(p for p in pts if self.t_min < p < self.t_max))

    def with_(self, **kw):
        return replace(self, **kw)

    # (de)serialization --------------------------------------------------------
    def to_dict(self):
        d = asdict(self)
        for k in ("omega0_sq", "f0", "p1", "p2"):
            d[k] = getattr(self, k).to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("omega0_sq", "f0", "p1", "p2"):
            if k in d and not isinstance(d[k], TimeProfile):
                d[k] = TimeProfile.from_dict(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def scenario_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> ScenarioConfig:
    """Read a TOML scenario file (schema documented in README)."""
    try:
        import tomllib
    except ImportError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return ScenarioConfig.from_dict(data)


def default_window(switch_times: Sequence[float], omega_in: float, pad: float = 10.0):
    """(t_min, t_max) padded by ``pad / omega_in`` around all switch times."""
    lo, hi = min(switch_times), max(switch_times)
    return lo - pad / omega_in, hi + pad / omega_in


def validate(config: ScenarioConfig, tol: float = ASYMPTOTIC_TOL) -> list[str]:
    """Return a list of human-readable violations (empty when valid)."""
    v = []
    c = config
    if not (c.omega_in > 0 and math.isfinite(c.omega_in)):
        v.append("omega_in: must be a finite positive frequency")
    if not (c.omega_out > 0 and math.isfinite(c.omega_out)):
        v.append("omega_out: must be a finite positive frequency")
    if not c.t_min < c.t_max:
        v.append("t_min/t_max: window must satisfy t_min < t_max")
    for name, eps in (("eps1", c.eps1), ("eps2", c.eps2)):
        if not (eps >= 0 and math.isfinite(eps)):
            v.append(f"{name}: noise strength must be finite and >= 0")
    for name, ti in (("t1", c.t1), ("t2", c.t2)):
        if not math.isfinite(ti) or ti > c.t_max:
            v.append(f"{name}: {name} must be finite (inside the simulation window)")
        elif ti < c.t_min:
            v.append(f"{name}: switch-on time precedes t_min")
    if c.t_e is not None:
        if not math.isfinite(c.t_e) or c.t_e > c.t_max:
            v.append("t_e: must be finite and <= t_max")
        if c.eps1 > 0 and not c.t1 < c.t_e:
            v.append("t_e: requires t1 < t_e")
        if c.eps2 > 0 and not c.t2 < c.t_e:
            v.append("t_e: requires t2 < t_e")
    if c.n_max < 0:
        v.append("n_max: truncation must be >= 0")
    if v and any(s.startswith("t_min") for s in v):
        return v

    def ends(prof):
        try:
            return evaluate_profile(prof, c.t_min), evaluate_profile(prof, c.t_max)
        except ProfileRangeError as exc:
            v.append(f"profile: {exc}")
            return None

    e = ends(c.omega0_sq)
    if e is not None:
        scale = max(1.0, c.omega_in ** 2, c.omega_out ** 2)
        if abs(e[0] - c.omega_in ** 2) > tol * scale:
            v.append("omega0_sq: must approach omega_in^2 at t_min")
        if abs(e[1] - c.omega_out ** 2) > tol * scale:
            v.append("omega0_sq: must approach omega_out^2 at t_max")
    e = ends(c.f0)
    if e is not None:
        if abs(e[0]) > tol:
            v.append("f0: force must vanish at t_min (asymptotics)")
        if abs(e[1]) > tol:
            v.append("f0: force must vanish at t_max (asymptotics)")
    grid = np.linspace(c.t_min, c.t_max, 2001)
    for name, eps, prof in (("p1", c.eps1, c.p1), ("p2", c.eps2, c.p2)):
        if eps == 0:
            continue
        e = ends(prof)
        if e is not None and abs(e[1]) > tol:
            v.append(f"{name}: noise profile must vanish at t_max")
        try:
            if np.min(evaluate_profile(prof, grid)) < 0:
                v.append(f"{name}: noise profile must be >= 0")
        except ProfileRangeError:
            pass
    return v
