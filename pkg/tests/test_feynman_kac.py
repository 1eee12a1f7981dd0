import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochqho.fokker_planck import Axis
from stochqho.feynman_kac import (FunctionalSpec, GeneratorSpec, Stepper, brownian_generator,
                                  default_endpoints, integral_equation_residual, kac_exact,
                                  mc_functional, neumann_terms, solve_Q)

GEN = brownian_generator(8.0, 201)


def test_kac_closed_form():
    assert kac_exact(0.0, 3.0) == 1.0
    # small-t expansion: 1 - lam t^2 / 2
    assert kac_exact(1.0, 1e-3) == pytest.approx(1 - 0.5e-6, abs=1e-12)


def test_no_potential_conserves_mass():
    f = solve_Q(GEN, FunctionalSpec(0.0, 1.0), (0.0,), dt=1e-2)
    assert f.average() == pytest.approx(1.0, abs=1e-6)


@given(st.floats(0.05, 1.0))
@settings(max_examples=6, deadline=None)
def test_solve_q_matches_exact(lam):
    spec = FunctionalSpec(0.0, 1.0, V1=lambda X, xp: lam * X[0] ** 2)
    # a 2-cell initial delta adds O(lam h^2) bias: use the finer grid
    f = solve_Q(brownian_generator(8.0, 401), spec, (0.0,), dt=5e-3)
    assert f.average() == pytest.approx(kac_exact(lam, 1.0), rel=1e-2)


def test_constant_potential_and_v2():
    spec = FunctionalSpec(0.0, 2.0, V1=lambda X, xp: 0.3 + 0 * X[0], V2=lambda X: 0.1 + 0 * X[0])
    assert solve_Q(GEN, spec, (0.0,), dt=1e-2).average() == pytest.approx(math.exp(-0.7), rel=1e-4)


def test_neumann_and_residual():
    spec = FunctionalSpec(0.0, 1.0, V1=lambda X, xp: 0.2 * X[0] ** 2)
    f = solve_Q(GEN, spec, (0.0,), dt=5e-3, keep_history=True)
    nr = neumann_terms(GEN, spec, (0.0,), 6, dt=5e-3)
    sums = [s.integrate() for s in nr.partial_sums]
    assert abs(sums[-1] - f.average()) < 1e-6
    assert not nr.diverging
    assert np.all(np.diff(nr.term_norms[1:]) < 0)
    rel, _ = integral_equation_residual(f.history, GEN, spec, (0.0,), dt=5e-3)
    assert rel < 1e-10
    # a perturbed candidate does not satisfy the equation
    bad = [h * 1.01 for h in f.history]
    assert integral_equation_residual(bad, GEN, spec, (0.0,), dt=5e-3)[0] > 1e-3


def test_endpoint_dependent_functional_vs_mc():
    lam = 0.5
    spec = FunctionalSpec(0.0, 1.0, V1=lambda X, xp: lam * (X[0] - xp[0]) ** 2,
                          endpoint_dependent=True)
    q = solve_Q(brownian_generator(8.0, 401), spec, (0.0,), dt=2e-3, n_endpoints=17).average()
    mc = mc_functional(GEN, spec, (0.0,), 20000, dt=2e-3, seed=3)
    # time reversal of Brownian motion makes this equal to the plain Kac value
    assert q == pytest.approx(kac_exact(lam, 1.0), rel=2e-3)
    assert abs(mc.mean - q) < 4 * mc.stderr + 2e-3


def test_mc_reproducible_for_fixed_seed_and_blocks():
    spec = FunctionalSpec(0.0, 0.5, V1=lambda X, xp: X[0] ** 2)
    a = mc_functional(GEN, spec, (0.0,), 300, dt=1e-2, seed=1, block_size=4096)
    b = mc_functional(GEN, spec, (0.0,), 300, dt=1e-2, seed=1, block_size=4096)
    c = mc_functional(GEN, spec, (0.0,), 300, dt=1e-2, seed=2, block_size=4096)
    assert a.mean == b.mean and a.mean != c.mean


def test_two_dimensional_ou_mass():
    g2 = GeneratorSpec((Axis(-6, 6, 61), Axis(-6, 6, 61)), lambda x, y: [-x, -y],
                       lambda x, y: {(0, 0): np.full_like(x, 0.5), (1, 1): np.full_like(x, 0.5),
                                     (0, 1): np.full_like(x, 0.2)})
    f = solve_Q(g2, FunctionalSpec(0.0, 1.0), (0.5, 0.0), dt=1e-2)
    assert f.average() == pytest.approx(1.0, abs=1e-4)


def test_default_endpoints_follow_density():
    ax = GEN.axes
    x = ax[0].coords
    ends = default_endpoints(ax, np.exp(-x * x / 2), n=5)[0]
    assert -6 < ends[0] < -3 and 3 < ends[-1] < 6 and len(ends) == 5
    assert np.allclose(default_endpoints(ax, None, n=3)[0], [-8, 0, 8])


def test_stepper_history_length():
    st_ = Stepper(GEN.operator(), 0.1, 10)
    h = st_.run(np.ones(GEN.shape[0]))
    assert len(h) == len(st_.substeps()) + 1
