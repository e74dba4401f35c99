from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwconvex.design import SampleSet
from pwconvex.selection import (
    Candidate,
    CriterionInput,
    candidate_fits,
    candidate_locations,
    criterion_dB,
    criterion_dI,
    criterion_pcic,
    select_model,
    sigma_hat2,
)
from pwconvex.spline import SplineConfig, fit_spline

from conftest import noisy_samples

SINE = lambda t: np.sin(2 * np.pi * t)


# ------------------------------------------------------------------ criteria


def test_criterion_worked_examples():
    assert criterion_dI(CriterionInput(1.0, 10, 0, 100, gamma1=1)) == pytest.approx(1.23457, abs=5e-6)
    assert criterion_dB(CriterionInput(1.0, 10, 0, 100, gamma2=1)) == pytest.approx(1.46052, abs=5e-6)
    assert criterion_pcic(CriterionInput(1.0, 10, 2, 100, gamma1=1, gamma2=2)) == pytest.approx(1.46198, abs=5e-6)


def test_criterion_input_validation():
    for bad in (
        dict(sigma_hat2=-1, p=1, K=0, N=10),
        dict(sigma_hat2=1, p=-1, K=0, N=10),
        dict(sigma_hat2=1, p=1, K=-1, N=10),
        dict(sigma_hat2=1, p=1, K=0, N=0),
        dict(sigma_hat2=1, p=1, K=0, N=10, gamma1=0),
    ):
        with pytest.raises(ValueError):
            CriterionInput(**bad)


def test_inflation_blows_up_when_p_reaches_n():
    assert criterion_dI(CriterionInput(1.0, 100, 0, 100)) == np.inf
    assert criterion_pcic(CriterionInput(1.0, 60, 1, 100, gamma1=2.0)) == np.inf


criterion_inputs = st.builds(
    CriterionInput,
    sigma_hat2=st.floats(0.0, 10.0),
    p=st.floats(0.0, 50.0),
    K=st.integers(0, 10),
    N=st.integers(60, 10_000),
    gamma1=st.floats(0.1, 1.0),
    gamma2=st.floats(0.1, 5.0),
)


@given(criterion_inputs)
@settings(max_examples=200, deadline=None)
def test_pcic_with_no_change_points_is_dI(c):
    assert criterion_pcic(dataclasses.replace(c, K=0)) == criterion_dI(c)


@given(criterion_inputs)
@settings(max_examples=200, deadline=None)
def test_pcic_strictly_increasing_in_K(c):
    if c.sigma_hat2 == 0:
        return
    a = criterion_pcic(c)
    b = criterion_pcic(dataclasses.replace(c, K=c.K + 1))
    assert b > a


@pytest.mark.parametrize("factor", [1e-3, 0.5, 7.0, 1e4])
def test_criteria_invariant_under_rescaling(factor):
    s = noisy_samples(SINE, 300, 0.2, 3)
    scaled = SampleSet(s.t, factor * s.y)
    a = fit_spline(s, SplineConfig(2, 1e-4, sigma=0.2))
    # lam / c^2 is the smoothing level whose minimiser is exactly c * f_hat
    b = fit_spline(scaled, SplineConfig(2, 1e-4 / factor**2, sigma=0.2 * factor))
    assert np.allclose(b.values, factor * a.values, rtol=1e-9, atol=1e-12 * factor)
    sa, sb = sigma_hat2(s, a), sigma_hat2(scaled, b)
    assert sb == pytest.approx(sa, rel=1e-9)
    for crit in (criterion_dI, criterion_dB, criterion_pcic):
        ia = CriterionInput(sa, a.p_eff, 2, s.n)
        ib = CriterionInput(sb, b.p_eff, 2, s.n)
        assert crit(ib) == pytest.approx(crit(ia), rel=1e-9)


# ------------------------------------------------------------------ model choice


@pytest.fixture(scope="module")
def sine_fits():
    s = noisy_samples(SINE, 300, 0.2, 5)
    fits = [fit_spline(s, SplineConfig(2, lam, sigma=0.2)) for lam in (1e-2, 1e-4, 1e-6)]
    return s, fits


def test_select_model_returns_argmin(sine_fits):
    s, fits = sine_fits
    cands = [Candidate(f, k) for f in fits for k in (0, 1)]
    res = select_model(s, cands)
    scores = [row["pcic"] for row in res.table]
    assert res.best_index == int(np.argmin(scores))
    assert res.best.K == 0
    assert [row["K"] for row in res.table] == [c.K for c in cands]


def test_winner_invariant_under_worse_candidate(sine_fits):
    s, fits = sine_fits
    cands = [Candidate(fits[1], 0), Candidate(fits[2], 1)]
    base = select_model(s, cands)
    worst = max(row["pcic"] for row in base.table)
    extra = Candidate(fits[0], 5)
    res = select_model(s, cands + [extra])
    assert res.table[-1]["pcic"] > worst
    assert res.best_index == base.best_index


def test_ties_prefer_fewer_change_points_then_larger_lambda(sine_fits):
    s, fits = sine_fits
    f = fits[1]
    twin = dataclasses.replace(f, lam=10 * f.lam)
    res = select_model(s, [Candidate(f, 0), Candidate(twin, 0)])
    assert res.best_index == 1
    res = select_model(s, [Candidate(twin, 0), Candidate(f, 0)])
    assert res.best_index == 0
    # gamma2 this small makes the K penalty vanish in floating point
    res = select_model(s, [Candidate(f, 1), Candidate(f, 0)], gamma2=1e-300)
    assert res.table[0]["pcic"] == res.table[1]["pcic"]
    assert res.best_index == 1
    with pytest.raises(ValueError):
        select_model(s, [])


# ------------------------------------------------------------------ candidates


def test_candidate_locations_rank_true_inflection_first():
    s = noisy_samples(SINE, 1000, 0.2, 7)
    locs = candidate_locations(s, 2, 3)
    assert len(locs) >= 3
    assert abs(locs[0][0] - 0.5) < 0.1
    xs = [x for x, _ in locs]
    assert len(set(xs)) == len(xs)


def test_candidate_fits_nested_and_feasible():
    s = noisy_samples(SINE, 500, 0.2, 9)
    cands = candidate_fits(s, 2, 2, trace="none")
    assert [c.K for c in cands] == [0, 1, 2]
    for a, b in zip(cands, cands[1:]):
        assert set(a.locations) <= set(b.locations)
    lam = cands[0].fit.lam
    assert all(c.fit.lam == lam for c in cands)
    # K = 1 places its point near the true inflection and fits better than K = 0
    assert abs(cands[1].locations[0] - 0.5) < 0.1
    assert cands[1].fit.rss < cands[0].fit.rss


def test_candidate_fits_fixed_lambda_and_exact_trace():
    s = noisy_samples(SINE, 300, 0.2, 11)
    cands = candidate_fits(s, 2, 1, lam=1e-5)
    assert all(c.fit.lam == 1e-5 for c in cands)
    assert all(np.isfinite(c.fit.p_eff) and 3 <= c.fit.p_eff < s.n for c in cands)


@pytest.mark.slow
def test_pcic_recovers_single_inflection():
    hits, R = 0, 200
    for seed in range(R):
        s = noisy_samples(SINE, 2000, 0.2, 20_000 + seed)
        res = select_model(s, candidate_fits(s, 2, 3, trace="hutchinson"))
        hits += res.best.K == 1
    assert hits / R >= 0.8
