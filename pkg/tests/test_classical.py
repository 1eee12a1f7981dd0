import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from stochqho.classical import (AsymptoticRegionNotReached, CharacteristicFrame, d_of_t,
                                extract_asymptotics, solve_classical)
from stochqho.scenario import ScenarioConfig, TimeProfile


def test_static_oscillator_is_plane_wave(static_config):
    sol = solve_classical(static_config)
    np.testing.assert_allclose(sol.xi, np.exp(1j * sol.t), atol=1e-8)
    np.testing.assert_allclose(sol.wronskian(), 1.0, atol=1e-9)
    np.testing.assert_allclose(sol.eta0, 0.0, atol=1e-14)


def test_ramp_invariants(ramp_config):
    sol = solve_classical(ramp_config)
    assert np.max(np.abs(sol.wronskian() - 1.0)) < 1e-8
    a = extract_asymptotics(sol)
    assert abs(a.C1) ** 2 - abs(a.C2) ** 2 == pytest.approx(1 / 1.6, abs=1e-8)
    assert a.rho == pytest.approx(abs(a.C2 / a.C1) ** 2)


def test_d_matches_quadrature(ramp_config):
    sol = solve_classical(ramp_config)
    cfg = ramp_config
    f = lambda t, part: getattr(sol.state(t)["xi"] * cfg.force(t), part)
    re = quad(f, cfg.t_min, cfg.t_max, args=("real",), limit=400, points=[1.0])[0]
    im = quad(f, cfg.t_min, cfg.t_max, args=("imag",), limit=400, points=[1.0])[0]
    oracle = 1j * (re + 1j * im) / math.sqrt(2 * cfg.omega_in)
    assert abs(d_of_t(sol, cfg.t_max) - oracle) < 1e-7
    assert abs(extract_asymptotics(sol).d - oracle) < 1e-7


def test_asymptotics_need_final_window():
    cfg = ScenarioConfig(omega0_sq=TimeProfile.ramp(5.0, 9.5, 1.0, 4.0), omega_out=2.0,
                         t_min=-10, t_max=10)
    with pytest.raises(AsymptoticRegionNotReached):
        extract_asymptotics(solve_classical(cfg))


@given(st.floats(0.3, 3.0), st.floats(0.3, 3.0))
@settings(max_examples=8, deadline=None)
def test_wronskian_conserved(wi, wo):
    cfg = ScenarioConfig(omega_in=wi, omega_out=wo,
                         omega0_sq=TimeProfile.ramp(-1.0, 1.0, wi * wi, wo * wo),
                         t_min=-8, t_max=8)
    sol = solve_classical(cfg)
    assert np.max(np.abs(sol.wronskian() - wi)) < 1e-7 * max(1, wi)
    a = extract_asymptotics(sol)
    assert abs(a.C1) ** 2 - abs(a.C2) ** 2 == pytest.approx(wi / wo, rel=1e-7)


def _noise_free_flow(cfg, u0, t0, t1):
    def rhs(t, y):
        om2 = cfg.omega_sq(t)
        phi = y[2] + 1j * y[3]
        dphi = -om2 - phi * phi
        return [y[1], cfg.force(t) - om2 * y[0], dphi.real, dphi.imag]

    return solve_ivp(rhs, (t0, t1), u0, rtol=1e-11, atol=1e-13, method="DOP853").y[:, -1]


def test_characteristic_map_matches_flow(ramp_config):
    sol = solve_classical(ramp_config)
    fr = CharacteristicFrame(sol, 0.0)
    xi = np.array([0.3, -0.2, 0.4, 0.9])
    np.testing.assert_allclose(fr.map(xi, 0.0), xi, atol=1e-10)
    for t in (1.5, 6.0):
        np.testing.assert_allclose(fr.map(xi, t), _noise_free_flow(ramp_config, xi, 0.0, t),
                                   atol=1e-7)


def test_jacobian_finite_difference(ramp_config):
    fr = CharacteristicFrame(solve_classical(ramp_config), 0.0)
    xi = np.array([0.1, 0.2, -0.3, 0.7])
    t = 3.0
    h = 1e-6
    J = np.empty((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        J[:, j] = (fr.map(xi + e, t) - fr.map(xi - e, t)) / (2 * h)
    assert fr.jacobian(xi, t) == pytest.approx(np.linalg.det(J), rel=1e-6)
