from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from pwconvex.design import SampleSet, sinusoidal
from pwconvex.kernels import (
    estimation_grid,
    gm_estimate,
    gm_weights,
    kernel_fit,
    kernel_moments,
    make_kernel,
)


def riemann_oracle(t, y, kernel, h, deriv, x):
    """Direct loop over the defining sum with midpoint gap weights, uniform design."""
    n = t.size
    edges = np.concatenate(([0.0], 0.5 * (t[1:] + t[:-1]), [1.0]))
    total = 0.0
    for i in range(n):
        w = n * (edges[i + 1] - edges[i])
        total += y[i] * w * float(kernel(np.array([(x - t[i]) / h]), deriv)[0])
    return total / (n * h ** (deriv + 1))


# ------------------------------------------------------------------ kernel family


def test_order_zero_kernel():
    k = make_kernel(0)
    assert k.coefficients[0] == Fraction(3, 4) and k.coefficients[2] == Fraction(-3, 4)
    assert k.norm_sq_exact[0] == Fraction(3, 5)


def test_order_one_kernel():
    k = make_kernel(1)
    assert k.normalization == Fraction(15, 16)
    assert k.norm_sq_exact[1] == Fraction(15, 7)


@pytest.mark.parametrize("ell", range(5))
def test_moment_and_boundary_conditions(ell):
    k = make_kernel(ell)
    assert quad(lambda s: k(np.array([s]))[0], -1, 1)[0] == pytest.approx(1.0, abs=1e-13)
    assert quad(lambda s: s * k(np.array([s]))[0], -1, 1)[0] == pytest.approx(0.0, abs=1e-13)
    for j in range(ell + 1):
        d = k.derivative(j)
        assert abs(d(1.0)) < 1e-9 and abs(d(-1.0)) < 1e-9
    for j in range(ell + 2):
        num = quad(lambda s: k(np.array([s]), j)[0] ** 2, -1, 1, limit=200)[0]
        assert num == pytest.approx(k.norm_sq(j), rel=1e-10)


def test_evaluation_matches_polynomial_and_vanishes_outside():
    k = make_kernel(2)
    s = np.linspace(-1.5, 1.5, 301)
    for j in range(4):
        ref = np.where(np.abs(s) <= 1, k.derivative(j)(s), 0.0)
        assert np.allclose(k(s, j), ref, atol=1e-12)


@pytest.mark.parametrize("ell", [-1, 5])
def test_unsupported_orders(ell):
    with pytest.raises(ValueError):
        make_kernel(ell)


# ------------------------------------------------------------------ estimator


def test_constant_data_reproduced():
    n = 1000
    t = (np.arange(n) + 0.5) / n
    s = SampleSet(t, np.full(n, 2.5))
    grid = estimation_grid(0.1, 51)
    bound = 2.5 * (0.5 / n) / 0.1
    for ell in range(3):
        k = make_kernel(ell)
        assert np.allclose(gm_estimate(s, k, 0.1, 0, grid), 2.5, atol=bound)
        assert np.allclose(gm_estimate(s, k, 0.1, 1, grid), 0.0, atol=bound / 0.1)


def test_quadratic_derivative_matches_direct_sum():
    n, h = 2000, 0.1
    t = (np.arange(n) + 0.5) / n
    s = SampleSet(t, t**2)
    k = make_kernel(1)
    est = gm_estimate(s, k, h, 1, np.array([0.5]))[0]
    assert est == pytest.approx(riemann_oracle(t, t**2, k, h, 1, 0.5), abs=1e-12)
    assert abs(est - 1.0) <= h


def test_weights_match_estimate_on_nonuniform_design(rng):
    dist = sinusoidal(0.3)
    t = np.sort(dist.quantile(rng.random(400)))
    s = SampleSet(t, np.sin(5 * t) + rng.standard_normal(t.size), dist=dist)
    k = make_kernel(1)
    grid = estimation_grid(0.15, 80)
    for j in (0, 1, 2):
        assert np.allclose(gm_weights(t, k, 0.15, j, grid, dist) @ s.y, gm_estimate(s, k, 0.15, j, grid), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    n = 300
    t = (np.arange(n) + 0.5) / n
    y1, y2 = r.standard_normal(n), r.standard_normal(n)
    k = make_kernel(1)
    grid = estimation_grid(0.2, 40)
    est = lambda y: gm_estimate(SampleSet(t, y), k, 0.2, 2, grid)
    assert np.allclose(est(a * y1 + b * y2), a * est(y1) + b * est(y2), atol=1e-9)


def test_polynomial_reproduction_rate():
    # error is O(h + D*/h^(j+1)); fit the constant at one setting, check the next at 2x
    k = make_kernel(2)
    poly = np.polynomial.Polynomial([0.3, -1.0, 2.0, 1.5])
    errs = []
    for n, h in ((500, 0.2), (2000, 0.1)):
        t = (np.arange(n) + 0.5) / n
        s = SampleSet(t, poly(t))
        grid = estimation_grid(h, 41)
        err = max(np.max(np.abs(gm_estimate(s, k, h, j, grid) - poly.deriv(j)(grid))) for j in (0, 1, 2))
        errs.append(err / (h + (0.5 / n) / h**3))
    assert errs[1] <= 2.0 * errs[0]


def test_grid_and_bandwidth_errors():
    n = 100
    t = (np.arange(n) + 0.5) / n
    s = SampleSet(t, np.zeros(n))
    k = make_kernel(1)
    with pytest.raises(ValueError):
        gm_estimate(s, k, 0.1, 1, np.array([0.05]))
    with pytest.raises(ValueError):
        gm_estimate(s, k, 0.004, 1, estimation_grid(0.004, 10))
    with pytest.raises(ValueError):
        gm_estimate(s, k, 0.1, 3, estimation_grid(0.1, 10))
    with pytest.raises(ValueError):
        estimation_grid(0.5, 10)


def test_kernel_fit_fields():
    n = 500
    t = (np.arange(n) + 0.5) / n
    fit = kernel_fit(SampleSet(t, np.sin(2 * np.pi * t)), make_kernel(1), 0.1, estimation_grid(0.1, 64))
    assert fit.ell == 1 and fit.h == 0.1
    assert fit.values_ell.shape == fit.values_ell1.shape == (64,)


# ------------------------------------------------------------------ moments


def test_moment_formula_values():
    m = kernel_moments(None, make_kernel(0), 0.1, 1000, 1.0, np.array([0.5]))
    assert m.sigma2[0] == pytest.approx(6.0e-3)
    m2 = kernel_moments(None, make_kernel(0), 0.1, 2000, 1.0, np.array([0.5]))
    assert m2.sigma2[0] == pytest.approx(m.sigma2[0] / 2)
    assert m2.xi2[0] == pytest.approx(m.xi2[0] / 2)


def test_monte_carlo_variance_and_correlation(rng):
    n, h, R = 2000, 0.1, 2000
    t = (np.arange(n) + 0.5) / n
    k = make_kernel(1)
    x = np.array([0.5])
    noise = rng.standard_normal((n, R))
    f1 = gm_weights(t, k, h, 1, x) @ noise
    f2 = gm_weights(t, k, h, 2, x) @ noise
    mom = kernel_moments(None, k, h, n, 1.0, x)
    assert np.var(f1) == pytest.approx(mom.sigma2[0], rel=0.10)
    assert np.var(f2) == pytest.approx(mom.xi2[0], rel=0.10)
    assert abs(np.corrcoef(f1[0], f2[0])[0, 1]) < 0.2
