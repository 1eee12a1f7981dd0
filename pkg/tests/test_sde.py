import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochqho import fokker_planck as fp
from stochqho.classical import solve_classical
from stochqho.rng import NoiseStream
from stochqho.scenario import ScenarioConfig, TimeProfile
from stochqho.sde import (FlaggedFractionError, ito_moment_solution, ito_path_residual,
                          load_checkpoint, mc_average, save_checkpoint, simulate, simulate_eta,
                          simulate_ito_wavefunction, simulate_u, simulate_z,
                          transition_estimate)

T = 2 * math.pi
NOISY = ScenarioConfig(eps1=0.01, eps2=0.02, p1=TimeProfile.window(0.0, 2 * T),
                       p2=TimeProfile.window(0.0, 2 * T), t_min=-5.0, t_max=3 * T, seed=5)


def test_noise_free_paths_follow_classical(ramp_config):
    sol = solve_classical(ramp_config)
    for scheme, tol in (("heun", 1e-5), ("em", 1e-2)):
        e = simulate(ramp_config, 3, t_start=-5.0, t_end=10.0, dt=1e-3, scheme=scheme,
                     solution=sol)
        xi, dxi = e.xi()
        s = sol.state(10.0)
        assert np.max(np.abs(xi - s["xi"])) < tol
        assert np.max(np.abs(e.states[-1, 0] - s["eta"])) < tol


def test_worker_count_does_not_change_bits():
    a = simulate_z(NOISY, 700, threads=1, block_size=128)
    b = simulate_z(NOISY, 700, threads=3, block_size=128)
    assert a.states.tobytes() == b.states.tobytes()
    assert np.array_equal(a.flags, b.flags)


def test_backends_bitwise(monkeypatch):
    monkeypatch.setenv("STOCHQHO_BACKEND", "numba")
    a = simulate_z(NOISY, 300)
    monkeypatch.setenv("STOCHQHO_BACKEND", "numpy")
    b = simulate_z(NOISY, 300)
    np.testing.assert_allclose(a.states, b.states, rtol=1e-12, atol=1e-12)


def test_seed_changes_paths():
    a = simulate_z(NOISY, 50, seed=1)
    b = simulate_z(NOISY, 50, seed=2)
    assert not np.array_equal(a.states, b.states)


def test_local_weight_identity():
    # exp(-2 int u3) = u4(t) / u4(t1) because u4 = Omega_in / r^2
    e = simulate_u(NOISY, 400, dt=T / 800)
    s = e.states[-1]
    s0 = solve_classical(NOISY).state(NOISY.t1)
    u4_0 = (s0["dxi"] / s0["xi"]).imag
    np.testing.assert_allclose(np.exp(-2 * s[4]), s[3] / u4_0, rtol=2e-3)


def test_force_noise_moments_match_gaussian():
    cfg = ScenarioConfig(eps2=0.05, p2=TimeProfile.window(0.0, T), t_min=-5, t_max=2 * T, seed=2)
    sol = solve_classical(cfg)
    e = simulate_eta(cfg, 20000, solution=sol, t_end=1.5 * T)
    mean, cov = fp.p1_covariance(cfg, sol, 1.5 * T)
    x = e.states[-1, :2]
    m = x.mean(axis=1)
    se = x.std(axis=1, ddof=1) / math.sqrt(x.shape[1])
    assert np.all(np.abs(m - mean) < 4 * se)
    c = np.cov(x)
    # stderr of a variance estimate ~ var * sqrt(2/N)
    np.testing.assert_allclose(np.diag(c), np.diag(cov), rtol=4 * math.sqrt(2 / 20000))


def test_transition_estimate_chunking_and_zero_spread(static_config):
    e = simulate_z(static_config, 64)
    est = transition_estimate(e, 4)
    assert np.all(est.stderr == 0.0)
    np.testing.assert_allclose(est.mean, np.eye(5), atol=1e-8)
    e = simulate_z(NOISY, 500)
    a = transition_estimate(e, 3, chunk=4096)
    b = transition_estimate(e, 3, chunk=37)
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-13)
    np.testing.assert_allclose(a.stderr, b.stderr, rtol=1e-9)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50))
@settings(max_examples=50)
def test_mc_average_matches_numpy(vals):
    v = np.array(vals)
    est = mc_average(v)
    assert est.mean == pytest.approx(v.mean(), abs=1e-12)
    assert est.stderr == pytest.approx(v.std(ddof=1) / math.sqrt(v.size), abs=1e-12)


def test_flagged_fraction_limit():
    with pytest.raises(FlaggedFractionError):
        mc_average(np.ones(10), np.array([True, True] + [False] * 8))


def test_noise_stream_reproducible():
    a = NoiseStream(3, 7, 0.01).increments(100)
    b = NoiseStream(3, 7, 0.01).increments(100)
    c = NoiseStream(3, 8, 0.01).increments(100)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    big = NoiseStream(1, 0, 0.25).increments(200000)
    assert big.var() == pytest.approx(0.25, rel=0.01)
    with pytest.raises(ValueError):
        NoiseStream(-1, 0)


def test_checkpoint_roundtrip(tmp_path):
    e = simulate_z(NOISY, 33)
    p = tmp_path / "ens.bin"
    save_checkpoint(p, e)
    back = load_checkpoint(p)
    assert back["t"] == e.times[-1] and back["dt"] == e.dt
    assert np.array_equal(back["states"], e.states[-1])
    assert np.array_equal(back["flags"], e.flags)
    (tmp_path / "junk.bin").write_bytes(b"x" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk.bin")


ITO = ScenarioConfig(eps2=0.05, p2=TimeProfile.constant(1.0), t2=0.0, t_min=-5, t_max=10,
                     omega0_sq=TimeProfile.constant(0.0), seed=9)


def test_ito_moments_match_fokker_planck():
    ens = simulate_ito_wavefunction(ITO, 20000, 2.0, dt=1e-3)
    S = ito_moment_solution(ens.eps, [0.0, 2.0])[-1]
    X = np.stack([ens.xi1[-1].real, ens.xi1[-1].imag, ens.xi2[-1].real, ens.xi2[-1].imag])
    n = X.shape[1]
    assert np.all(np.abs(X.mean(axis=1)) < 4 * X.std(axis=1) / math.sqrt(n) + 1e-15)
    prod = X[:, None, :] * X[None, :, :]
    C = prod.mean(axis=2)
    se = prod.std(axis=2, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(C - S) <= 4 * se + 1e-12)


def test_ito_residual_first_order():
    r = [ito_path_residual(ITO, 200, 2.0, dt, seed=1).mean() for dt in (0.02, 0.01, 0.005)]
    slopes = np.diff(np.log(r)) / np.diff(np.log([0.02, 0.01, 0.005]))
    assert np.all((slopes > 0.8) & (slopes < 1.2))


def test_ito_rejects_frequency_noise():
    with pytest.raises(ValueError):
        simulate_ito_wavefunction(ITO.with_(eps1=0.1), 10, 1.0)
