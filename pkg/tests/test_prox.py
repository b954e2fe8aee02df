import math

import numpy as np
import pytest
from scipy.optimize import brentq

from ncstomo.errors import DataError
from ncstomo.prox import (
    L1Conj,
    NonnegConj,
    PoissonConj,
    QuadraticConj,
    moreau_conj,
    project_box,
    prox_conj_nonneg,
    prox_conj_poisson,
    prox_conj_quadratic,
    soft_threshold,
)


def prox_pairs(rng):
    counts = rng.poisson(5.0, size=50).astype(float)
    counts[:5] = 0.0
    return [QuadraticConj(), L1Conj(0.7), PoissonConj(counts), NonnegConj()]


@pytest.mark.parametrize("alpha", [1e-3, 1.0, 1e3])
def test_moreau_identity(rng, alpha):
    for g in prox_pairs(rng):
        z = 3.0 * rng.standard_normal(50)
        direct = g.evaluate(z, alpha)
        via_primal = moreau_conj(g.prox_primal, z, alpha)
        scale = max(1.0, float(np.abs(direct).max()), float(np.abs(z).max()))
        assert np.abs(direct - via_primal).max() <= 1e-12 * scale, type(g).__name__


def test_box_projection_uses_radius_only():
    z = np.array([-3.0, -0.2, 0.0, 0.5, 9.0])
    g = L1Conj(0.5)
    for alpha in (1e-3, 1.0, 1e3):
        np.testing.assert_array_equal(g.evaluate(z, alpha), [-0.5, -0.2, 0.0, 0.5, 0.5])
    assert g.lipschitz(16) == pytest.approx(0.5 * 4.0)
    with pytest.raises(ValueError):
        project_box(z, -1.0)


def poisson_oracle(u, c):
    """prox_{alpha g*}(u) for g(y) = y - b log y: root of v - u + c / (1 - v) on v < 1."""
    if c == 0.0:
        return min(u, 1.0)

    def f(v):
        return v - u + c / (1.0 - v)

    lo = min(u, 1.0) - c - 1.0
    hi = 1.0 - 0.5 * c / (abs(u) + 2.0 + c)
    return brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def test_poisson_prox_matches_scalar_minimization():
    us = np.linspace(-5.0, 5.0, 21)
    cs = np.linspace(0.0, 10.0, 21)
    U, C = np.meshgrid(us, cs, indexing="ij")
    S = prox_conj_poisson(U, C)
    for i, u in enumerate(us):
        for j, c in enumerate(cs):
            assert S[i, j] == pytest.approx(poisson_oracle(u, c), abs=1e-9)


def test_poisson_prox_zero_counts_is_exact_min():
    u = np.linspace(-3.0, 3.0, 61)
    np.testing.assert_array_equal(prox_conj_poisson(u, 0.0), np.minimum(u, 1.0))


def test_poisson_prox_stays_below_one(rng):
    u = 10.0 * rng.standard_normal(100)
    assert np.all(prox_conj_poisson(u, 0.3) < 1.0)
    with pytest.raises(ValueError):
        prox_conj_poisson(u, -1.0)


def test_quadratic_and_nonneg_closed_forms():
    z = np.array([-2.0, 0.0, 4.0])
    np.testing.assert_allclose(prox_conj_quadratic(z, 1.0), z / 2.0)
    np.testing.assert_array_equal(prox_conj_nonneg(z), [-2.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        prox_conj_quadratic(z, 0.0)


def test_soft_threshold():
    np.testing.assert_array_equal(soft_threshold(np.array([-3.0, 0.5, 2.0]), 1.0), [-2.0, 0.0, 1.0])


def test_objectives():
    y = np.array([1.0, -2.0, 2.0])
    assert QuadraticConj().objective(y) == pytest.approx(4.5)
    assert L1Conj(2.0).objective(y) == pytest.approx(10.0)
    assert NonnegConj().objective(y) == 0.0

    b = np.array([0.0, 2.0, 3.0])
    g = PoissonConj(b)
    assert g.objective(b + 1.0) == pytest.approx(1 + 3 + 4 - 2 * math.log(3) - 3 * math.log(4))
    assert g.objective(np.array([1.0, 0.0, 1.0])) == math.inf
    assert g.objective(np.array([-1.0, 1.0, 1.0])) == math.inf
    assert g.objective(np.array([0.0, 1.0, 1.0])) == pytest.approx(2.0)
    with pytest.raises(DataError):
        PoissonConj(np.array([-1.0]))


@pytest.mark.parametrize("alpha", [1e-3, 1.0, 1e3])
def test_conjugate_proxes_are_firmly_nonexpansive(rng, alpha):
    for g in prox_pairs(rng):
        for _ in range(100):
            a = 3.0 * rng.standard_normal(50)
            b = 3.0 * rng.standard_normal(50)
            pa, pb = g.evaluate(a, alpha), g.evaluate(b, alpha)
            dp = pa - pb
            slack = 1e-12 * max(1.0, float(np.vdot(a - b, a - b)))
            assert float(np.vdot(dp, dp)) <= float(np.vdot(dp, a - b)) + slack, type(g).__name__
            assert np.linalg.norm(dp) <= np.linalg.norm(a - b) * (1 + 1e-12)
