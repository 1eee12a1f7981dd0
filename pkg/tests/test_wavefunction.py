import math
import os
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial.hermite import hermgauss

from stochqho.classical import solve_classical
from stochqho.wavefunction import (SingularFrame, TrajectoryPoint, TruncationWarning,
                                   cnm_batch, coefficients_cnm, coefficients_from_trajectory,
                                   eigenfunctions, eval_eigenfunction, generating_coefficients,
                                   project_direct, psi_stc_all)


def _point(r, gamma, dr, eta, deta, sigma, t, wi):
    xi = r * np.exp(1j * gamma)
    dxi = (dr + 1j * wi / r) * np.exp(1j * gamma)
    return TrajectoryPoint(t, xi, dxi, eta, deta, sigma, gamma)


points = st.builds(
    _point, st.floats(0.5, 2.0), st.floats(-3, 3), st.floats(-1, 1), st.floats(-1, 1),
    st.floats(-1, 1), st.floats(-2, 2), st.floats(0, 10), st.just(1.0))


def test_eigenfunctions_orthonormal():
    s, w = hermgauss(80)
    for om in (0.5, 1.0, 3.0):
        x = s / math.sqrt(om)
        phi = eigenfunctions(20, om, x) * np.exp(s * s / 2)
        G = (phi * w) @ phi.T / math.sqrt(om)
        np.testing.assert_allclose(G, np.eye(21), atol=1e-12)


def test_eigenfunction_ground_state():
    assert eval_eigenfunction(0, 2.0, 0.0) == pytest.approx((2 / math.pi) ** 0.25)
    with pytest.raises(ValueError):
        eval_eigenfunction(-1, 1.0, 0.0)


def test_high_order_finite():
    v = eigenfunctions(400, 1.0, np.linspace(-40, 40, 201))
    assert np.all(np.isfinite(v))


@given(points)
@settings(max_examples=25, deadline=None)
def test_psi_orthonormal(tp):
    x = np.linspace(tp.eta - 14 * tp.r, tp.eta + 14 * tp.r, 4001)
    psi = psi_stc_all(8, x, tp, 1.0)
    G = (psi.conj() @ psi.T) * (x[1] - x[0])
    np.testing.assert_allclose(G, np.eye(9), atol=1e-10)


@given(points, st.floats(0.5, 2.0))
@settings(max_examples=25, deadline=None)
def test_recurrence_matches_projection(tp, wo):
    gen = generating_coefficients(tp.xi, tp.dxi, tp.eta, tp.deta, tp.sigma, tp.t, 1.0, wo)
    c = coefficients_cnm(gen, 6, tp.t).c
    d = project_direct(tp, 1.0, wo, 6)
    # c00 branch: a global sign is irrelevant for |c|^2
    s = 1.0 if abs(c[0, 0] - d[0, 0]) < abs(c[0, 0] + d[0, 0]) else -1.0
    np.testing.assert_allclose(s * c, d, atol=1e-9)


@given(points)
@settings(max_examples=25, deadline=None)
def test_rows_unitary(tp):
    c = coefficients_from_trajectory(tp, 1.0, 1.3, 160).c
    rows = np.sum(np.abs(c[:5]) ** 2, axis=1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-9)


def test_truncation_warning():
    tp = _point(2.0, 0.3, 0.8, 1.0, 0.5, 0.0, 1.0, 1.0)
    gen = generating_coefficients(tp.xi, tp.dxi, tp.eta, tp.deta, tp.sigma, tp.t, 1.0, 1.0)
    with pytest.warns(TruncationWarning):
        coefficients_cnm(gen, 2, check_rows=2)


def test_singular_frame():
    with pytest.raises(SingularFrame):
        generating_coefficients(0.0, 1j, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0)


def test_backends_agree(monkeypatch):
    rng = np.random.default_rng(4)
    n = 300
    r = 1 + 0.2 * rng.random(n)
    xi = r * np.exp(1j * rng.uniform(0, 6, n))
    dxi = 1j * xi / r ** 2 + 0.1 * rng.standard_normal(n)
    gen = generating_coefficients(xi, dxi, rng.standard_normal(n), rng.standard_normal(n),
                                  np.zeros(n), 2.0, 1.0, 1.0)
    monkeypatch.setenv("STOCHQHO_BACKEND", "numba")
    a = cnm_batch(gen, 12)
    monkeypatch.setenv("STOCHQHO_BACKEND", "numpy")
    b = cnm_batch(gen, 12)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_no_noise_identity(static_config):
    sol = solve_classical(static_config)
    s = sol.state(9.0)
    gen = generating_coefficients(s["xi"], s["dxi"], s["eta"], s["deta"], s["sigma"], 9.0,
                                  1.0, 1.0)
    c = coefficients_cnm(gen, 8).c
    np.testing.assert_allclose(np.abs(c) ** 2, np.eye(9), atol=1e-8)
