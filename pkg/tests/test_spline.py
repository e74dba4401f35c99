from __future__ import annotations

from math import comb

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwconvex.design import SampleSet
from pwconvex.errors import ConditioningError
from pwconvex.spline import (
    SplineConfig,
    default_grid_size,
    fit_spline,
    gcv_select,
    grid_derivative,
    spline_system,
    v_norm,
)

from conftest import dense_fit, dense_spline_matrices, noisy_samples


def mp_dense_solve(t, y, grid_size, m, lam, sigma, dps=50):
    """Dense normal equations in extended precision; returns (values, hat trace)."""
    with mpmath.workdps(dps):
        g = grid_size
        dx = mpmath.mpf(1) / (g - 1)
        S = mpmath.zeros(len(t), g)
        for i, ti in enumerate(t):
            ti = mpmath.mpf(float(ti))
            k = min(int(mpmath.floor(ti / dx)), g - 2)
            frac = ti / dx - k
            S[i, k] += 1 - frac
            S[i, k + 1] += frac
        D = mpmath.zeros(g - m, g)
        for r in range(g - m):
            for i in range(m + 1):
                D[r, r + i] = (-1) ** (m - i) * comb(m, i)
        w = [mpmath.mpf(1)] * (g - m)
        w[0] = w[-1] = mpmath.mpf(1) / 2
        total = sum(w)
        P = D.T * mpmath.diag([x / total for x in w]) * D / dx ** (2 * m)
        A = S.T * S + mpmath.mpf(lam) * len(t) * mpmath.mpf(sigma) ** 2 / 2 * P
        f = mpmath.lu_solve(A, S.T * mpmath.matrix([float(v) for v in y]))
        H = S * mpmath.inverse(A) * S.T
        return np.array([float(v) for v in f]), float(sum(H[i, i] for i in range(len(t))))


# ------------------------------------------------------------------ oracle


def test_matches_dense_normal_equations():
    t = np.array([0.03, 0.11, 0.29, 0.42, 0.58, 0.77, 0.96])
    y = np.array([0.4, -0.2, 1.1, 0.7, -0.5, 0.3, 0.9])
    s = SampleSet(t, y, 0.5)
    for m in (1, 2, 3):
        fit = fit_spline(s, SplineConfig(m, 0.01, 24), trace="exact")
        ref, trace = mp_dense_solve(t, y, 24, m, 0.01, 0.5)
        assert np.max(np.abs(fit.values - ref)) < 1e-10
        assert fit.p_eff == pytest.approx(trace, abs=1e-9)


def test_matches_dense_oracle_on_larger_problem(rng):
    s = noisy_samples(lambda t: np.sin(6 * t), 150, 0.2, 3, equispaced=False)
    fit = fit_spline(s, SplineConfig(2, 1e-4, 120))
    assert np.max(np.abs(fit.values - dense_fit(s, 120, 2, 1e-4, 0.2))) < 1e-10


def test_objective_and_diagnostics_consistent():
    s = noisy_samples(np.cos, 80, 0.3, 1)
    fit = fit_spline(s, SplineConfig(2, 1e-3, 200), trace="exact")
    S, _ = dense_spline_matrices(s.t, 200, 2)
    r = s.y - S @ fit.values
    assert fit.rss == pytest.approx(r @ r, rel=1e-12)
    w = np.ones(198)
    w[[0, -1]] = 0.5
    penalty = np.sum(w / w.sum() * (np.diff(fit.values, 2) * 199**2) ** 2)
    vp = 1e-3 / 2 * penalty + r @ r / (80 * 0.09)
    assert fit.vp_value == pytest.approx(vp, rel=1e-12)
    assert 2 <= fit.p_eff <= 80
    assert np.array_equal(fit.deriv[0], fit.values)


# ------------------------------------------------------------------ limits


def test_large_lambda_gives_regression_line(rng):
    t = np.sort(rng.random(100))
    y = np.sin(4 * t) + 0.1 * rng.standard_normal(100)
    fit = fit_spline(SampleSet(t, y, 1.0), SplineConfig(2, 1e9, 256))
    line = np.polyval(np.polyfit(t, y, 1), fit.grid)
    assert np.max(np.abs(fit.values - line)) < 1e-4 * np.ptp(y)
    assert fit.p_eff == pytest.approx(2.0, abs=1e-6)


def test_excessive_stiffness_and_zero_lambda_refused(rng):
    s = SampleSet(np.sort(rng.random(100)), rng.standard_normal(100), 1.0)
    with pytest.raises(ConditioningError):
        fit_spline(s, SplineConfig(2, 1e12, 256))
    with pytest.raises(ValueError):
        SplineConfig(2, 0.0)


def test_small_lambda_interpolates():
    n = 50
    t = (np.arange(n) + 0.5) / n
    y = np.random.default_rng(4).standard_normal(n)
    # grid 101 puts every sample on a node
    fit = fit_spline(SampleSet(t, y, 1.0), SplineConfig(2, 1e-16, 101), trace="exact")
    assert np.max(np.abs(fit.fitted - y)) < 1e-6
    assert fit.p_eff == pytest.approx(n, rel=0.01)


# ------------------------------------------------------------------ invariants


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_superposition(a, b, seed):
    r = np.random.default_rng(seed)
    t = np.sort(r.random(60))
    y1, y2 = r.standard_normal(60), r.standard_normal(60)
    conf = SplineConfig(2, 1e-3, 128, 1.0)
    f = lambda y: fit_spline(SampleSet(t, y, 1.0), conf, trace="none").values
    assert np.allclose(f(a * y1 + b * y2), a * f(y1) + b * f(y2), atol=1e-10)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_reproduces_null_space_polynomials(m, rng):
    # linear interpolation is exact for degree <= 1 anywhere, higher degrees on nodes
    t = np.sort(rng.random(90)) if m <= 2 else np.linspace(0, 1, 300)[5:-5:3]
    poly = np.polynomial.Polynomial(rng.standard_normal(m))
    fit = fit_spline(SampleSet(t, poly(t), 1.0), SplineConfig(m, 1.0, 300), trace="none")
    assert np.max(np.abs(fit.values - poly(fit.grid))) < 1e-8


def test_p_eff_nonincreasing_in_lambda():
    s = noisy_samples(np.sin, 300, 0.1, 5)
    lams = np.geomspace(1e-10, 10, 25)
    p = [fit_spline(s, SplineConfig(2, lam), trace="exact").p_eff for lam in lams]
    assert np.all(np.diff(p) <= 1e-9)


def test_trace_methods_agree():
    s = noisy_samples(np.sin, 400, 0.1, 6)
    conf = SplineConfig(2, 1e-5)
    system = spline_system(s.t, conf.resolved_grid(400), 2)
    scale = system.penalty_scale(1e-5, 0.1)
    exact = system.hat_trace(scale, "exact")
    assert system.hat_trace(scale, "cholesky") == pytest.approx(exact, rel=1e-8)
    assert system.hat_trace(scale, "hutchinson", probes=256) == pytest.approx(exact, rel=0.1)
    assert np.isnan(system.hat_trace(scale, "none"))


def test_default_grid_size():
    assert default_grid_size(10) == 256
    assert default_grid_size(1000) == 2000
    assert default_grid_size(10**5) == 4096


def test_grid_derivative_of_polynomial():
    g = np.linspace(0, 1, 201)
    d = grid_derivative(g**3, 2, g)
    assert np.allclose(d[5:-5], 6 * g[5:-5], atol=1e-3)


# ------------------------------------------------------------------ GCV


def test_gcv_score_definition():
    s = noisy_samples(lambda t: np.sin(2 * np.pi * t), 200, 0.3, 9)
    res = gcv_select(s, SplineConfig(2))
    k = int(np.argmin(res.score_curve))
    assert res.lambda_star == res.lambdas[k]
    fit = res.fit
    assert res.score_curve[k] == pytest.approx(fit.rss / 200 / (1 - fit.p_eff / 200) ** 2, rel=1e-9)


def test_gcv_pure_noise_picks_largest_lambda():
    hits = 0
    lams = np.geomspace(1e-8, 1e2, 21)
    for seed in range(100):
        s = noisy_samples(lambda t: 0 * t, 200, 1.0, seed)
        hits += gcv_select(s, SplineConfig(2, grid_size=256), lams).lambda_star == lams[-1]
    assert hits >= 90


def test_gcv_noiseless_smooth_truth():
    n = 300
    t = (np.arange(n) + 0.5) / n
    f = lambda x: np.sin(2 * np.pi * x)
    s = SampleSet(t, f(t), 1.0)
    lams = np.geomspace(1e-12, 1e-2, 21)
    res = gcv_select(s, SplineConfig(2), lams)
    assert res.lambda_star < lams[-1]
    err = lambda fit: np.mean((fit.values - f(fit.grid)) ** 2)
    assert err(res.fit) <= err(fit_spline(s, SplineConfig(2, lams[-1], sigma=1.0)))


def test_gcv_rejects_bad_grid():
    s = noisy_samples(np.sin, 50, 0.1, 0)
    with pytest.raises(ValueError):
        gcv_select(s, SplineConfig(2), [])


# ------------------------------------------------------------------ V-norm


def test_v_norm_examples():
    n = 100
    t = (np.arange(n) + 0.5) / n
    s = SampleSet(t, np.zeros(n), 1.0)
    conf = SplineConfig(2, 2.0, 512, 1.0)
    g = np.linspace(0, 1, 512)
    assert v_norm(np.zeros(512), s, conf) == 0.0
    assert v_norm(np.full(512, 3.0), s, conf) == pytest.approx(9.0)
    S, _ = dense_spline_matrices(t, 512, 2)
    assert v_norm(g**2, s, conf) == pytest.approx(4.0 + np.mean((S @ g**2) ** 2), abs=1e-8)
    assert v_norm(g**2, s, conf) == pytest.approx(4.0 + np.mean(t**4), abs=1e-5)
    with pytest.raises(ValueError):
        v_norm(np.zeros(10), s, conf)
