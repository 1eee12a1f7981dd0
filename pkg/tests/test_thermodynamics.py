import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stochqho import thermodynamics as th
from stochqho.scenario import ScenarioConfig, TimeProfile
from stochqho.sde import simulate_u

betas = st.floats(0.05, 30.0)


def test_planck_at_ln2():
    assert th.planck_w0(math.log(2)) == pytest.approx(math.sqrt(2), rel=1e-15)
    with pytest.raises(ValueError):
        th.planck_w0(0.0)


@given(betas)
def test_planck_is_the_canonical_sum(beta):
    n = int(60 / beta) + 40
    assert th.canonical_weights(beta, n).sum() == pytest.approx(th.planck_w0(beta), rel=1e-12)


@given(betas)
def test_planck_large_beta_finite(beta):
    v = th.planck_w0(beta * 100)
    assert math.isfinite(v) and v >= 0


@settings(max_examples=60)
@given(arrays(float, (6, 6), elements=st.floats(0, 1)), arrays(float, 6, elements=st.floats(0, 2)))
def test_nonequilibrium_conserves_total(D, w0):
    r = th.nonequilibrium_w(D, w0)
    assert r.total == pytest.approx(r.total0, rel=1e-12, abs=1e-12)


def test_nonequilibrium_identity_is_trivial():
    w0 = th.canonical_weights(1.0, 5)
    r = th.nonequilibrium_w(np.eye(5), w0)
    np.testing.assert_allclose(r.w, w0, rtol=1e-15)
    assert r.truncation_defect == 0.0


def test_nonequilibrium_two_level_swap():
    w0 = np.array([0.6, 0.4])
    r = th.nonequilibrium_w(np.array([[0.0, 1.0], [1.0, 0.0]]), w0)
    np.testing.assert_allclose(r.w, [0.4, 0.6])


def _gaussian(x, w, shift=0.0):
    return (w / math.pi) ** 0.25 * np.exp(-0.5 * w * (x - shift) ** 2 + 0.3j * x)


def test_realization_is_rank_one():
    x = np.linspace(-8, 8, 241)
    rho = th.realization_matrix(_gaussian(x, 1.3, 0.4), x, 1.0)
    d = th.entropy_formal_partial(rho)
    assert d.rank_one and d.entropy == pytest.approx(0.0, abs=1e-9)
    assert d.lambda1 == pytest.approx(th.trace_x(rho), rel=1e-9)
    assert th.trace_x(rho) == pytest.approx(1.0, rel=1e-9)
    assert rho.hermiticity_error() < 1e-15


def test_mixture_entropy_matches_weights():
    # two orthogonal states with weights 0.3, 0.7
    x = np.linspace(-10, 10, 401)
    g0 = _gaussian(x, 1.0)
    g1 = math.sqrt(2) * x * g0
    rho = th.realization_matrix(g0, x, 1.0, 0.3)
    rho.values = rho.values + th.realization_matrix(g1, x, 1.0, 0.7).values
    s = th.entropy_averaged(rho)
    exact = -(0.3 * math.log(0.3) + 0.7 * math.log(0.7))
    assert s.normalized == pytest.approx(exact, rel=1e-8)


def test_entropy_rejects_negative_spectrum():
    with pytest.raises(ValueError):
        th.entropy_averaged(np.diag([1.0, -0.1]))


def test_kind_is_validated():
    with pytest.raises(ValueError):
        th.DensityMatrixGrid(np.arange(3.0), np.eye(3), "other", 1.0)


def test_zero_noise_entropy_vanishes(static_config):
    x = np.linspace(-7, 7, 121)
    ens = simulate_u(static_config, 50, seed=1)
    rho, singles = th.build_rho0(static_config, ens, x, keep=2)
    s = th.entropy_averaged(rho)
    assert s.normalized < 1e-8
    assert s.trace == pytest.approx(1.0, rel=1e-6)
    assert th.entropy_formal_partial(singles[0]).rank_one


def test_frequency_noise_mixes():
    cfg = ScenarioConfig(eps1=0.05, p1=TimeProfile.window(0.0, 2 * math.pi), t1=0.0,
                         t_min=-5.0, t_max=3 * math.pi)
    x = np.linspace(-7, 7, 121)
    rho, _ = th.build_rho0(cfg, simulate_u(cfg, 400, seed=2), x)
    assert th.entropy_averaged(rho).normalized > 1e-3


def test_ground_energy_without_noise():
    e = th.ground_energy(ScenarioConfig(omega_in=1.7, omega_out=1.7))
    assert e.E0 == 0.85 and e.broadening == 0.0 and e.lifetime == math.inf


def test_ground_energy_scale_covariance():
    a = th.ground_energy(ScenarioConfig(eps1=0.02, p1=TimeProfile.constant(1.0)))
    w = 1.5
    b = th.ground_energy(ScenarioConfig(omega_in=w, omega_out=w, eps1=0.02 * w ** 3,
                                        p1=TimeProfile.constant(1.0)))
    assert b.E0 / w == pytest.approx(a.E0, rel=1e-3)
    assert b.broadening / w == pytest.approx(a.broadening, rel=1e-3)
