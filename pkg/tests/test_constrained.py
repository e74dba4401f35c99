from __future__ import annotations

import numpy as np
import pytest
from scipy import sparse

from pwconvex.constrained import (
    BandedQuadratic,
    ConstraintSpec,
    DenseQuadratic,
    SignInterval,
    active_set_qp,
    constraint_rows,
    fit_constrained,
)
from pwconvex.design import SampleSet
from pwconvex.errors import NonConvergenceError
from pwconvex.spline import SplineConfig, fit_spline, spline_system, v_norm

from conftest import dense_spline_matrices, enumerate_qp, noisy_samples


def random_qp(r: np.random.Generator, n: int = 8, k: int = 5):
    a = r.standard_normal((n, n))
    q = a @ a.T + 0.5 * np.eye(n)
    return q, r.standard_normal(n), r.standard_normal((r.integers(1, k + 1), n))


# ------------------------------------------------------------------ QP solver


def test_random_qps_match_enumeration():
    r = np.random.default_rng(2024)
    for _ in range(30):
        q, b, c = random_qp(r)
        sol = active_set_qp(q, b, c)
        ref = enumerate_qp(q, b, c)
        assert np.max(np.abs(sol.values - ref)) < 1e-9
        assert np.all(c @ sol.values >= -1e-9)


def test_cold_start_matches_enumeration():
    r = np.random.default_rng(7)
    for _ in range(30):
        q, b, c = random_qp(r)
        sol = active_set_qp(q, b, c, warm_start=False)
        assert np.max(np.abs(sol.values - enumerate_qp(q, b, c))) < 1e-9


def test_kkt_certificate():
    r = np.random.default_rng(11)
    for _ in range(30):
        q, b, c = random_qp(r)
        sol = active_set_qp(q, b, c)
        u = sol.multipliers
        assert np.all(u >= -1e-12)
        assert np.max(np.abs(q @ sol.values - b - c.T @ u)) < 1e-8
        slack = c @ sol.values
        assert np.all(np.abs(slack[sol.active_set]) < 1e-9)
        inactive = np.setdiff1d(np.arange(c.shape[0]), sol.active_set)
        assert np.all(u[inactive] == 0.0)
        assert sol.kkt_residual <= 1e-8


def test_objective_monotone_during_dual_steps():
    r = np.random.default_rng(5)
    for _ in range(30):
        q, b, c = random_qp(r, n=10, k=8)
        trace = active_set_qp(q, b, c, warm_start=False).objective_trace
        assert np.all(np.diff(trace) >= -1e-12 * max(1.0, abs(trace[0])))


def test_no_constraints_is_plain_solve(rng):
    q, b, _ = random_qp(rng)
    sol = active_set_qp(q, b, np.zeros((0, 8)))
    assert np.max(np.abs(sol.values - np.linalg.solve(q, b))) < 1e-12


def test_banded_backend_without_constraints():
    s = noisy_samples(np.sin, 120, 0.2, 4)
    system = spline_system(s.t, 256, 2)
    scale = system.penalty_scale(1e-4, 0.2)
    sol = active_set_qp(BandedQuadratic(system, scale), system.St @ s.y, sparse.csr_matrix((0, 256)))
    assert np.max(np.abs(sol.values - system.smooth(s.y, scale))) < 1e-12


def test_one_dimensional_hand_kkt():
    sol = active_set_qp(np.array([[1.0]]), np.array([1.0]), np.array([[-1.0]]))
    assert sol.values[0] == pytest.approx(0.0, abs=1e-15)
    assert sol.multipliers[0] == pytest.approx(1.0)
    assert list(sol.active_set) == [0]


def test_iteration_cap_raises_with_best_iterate():
    r = np.random.default_rng(3)
    q, b, _ = random_qp(r, n=6)
    c = -np.eye(6)
    with pytest.raises(NonConvergenceError) as info:
        active_set_qp(q, b + 10.0, c, max_iter=1, warm_start=False)
    assert info.value.best is not None


def test_dense_and_banded_backends_agree():
    s = noisy_samples(lambda t: np.sin(6 * t), 200, 0.1, 8)
    system = spline_system(s.t, 150, 3)
    scale = system.penalty_scale(1e-5, 0.1)
    spec = ConstraintSpec(2, (SignInterval(0.0, 0.5, -1), SignInterval(0.5, 1.0, 1)))
    rows, pos = constraint_rows(spec, system.grid, 3)
    S, P = dense_spline_matrices(s.t, 150, 3)
    dense = active_set_qp(DenseQuadratic(S.T @ S + scale * P), S.T @ s.y, rows)
    banded = active_set_qp(BandedQuadratic(system, scale), system.St @ s.y, rows, positions=pos)
    assert np.max(np.abs(dense.values - banded.values)) < 1e-6 * np.max(np.abs(banded.values))
    assert set(dense.active_set) == set(banded.active_set)


# ------------------------------------------------------------------ constraint model


def test_constraint_spec_normalisation():
    spec = ConstraintSpec(2, ((0.5, 0.8, 1), (0.1, 0.3, 1), (0.25, 0.5, 1)))
    assert [(iv.lo, iv.hi) for iv in spec.intervals] == [(0.1, 0.8)]
    touching = ConstraintSpec(1, ((0.0, 0.5, 1), (0.5, 1.0, -1)))
    assert len(touching) == 2
    with pytest.raises(ValueError):
        ConstraintSpec(1, ((0.0, 0.6, 1), (0.5, 1.0, -1)))
    with pytest.raises(ValueError):
        SignInterval(0.5, 0.5, 1)
    with pytest.raises(ValueError):
        SignInterval(0.1, 0.5, 0)


def test_constraint_rows_positions_and_order_check():
    grid = np.linspace(0, 1, 11)
    rows, pos = constraint_rows(ConstraintSpec(2, ((0.3, 0.6, -1),)), grid)
    assert pos.tolist() == [3.0, 4.0, 5.0, 6.0]
    assert rows.toarray()[0, 2:5].tolist() == [-1.0, 2.0, -1.0]
    with pytest.raises(ValueError):
        constraint_rows(ConstraintSpec(3, ((0.3, 0.6, 1),)), grid, m=2)


def test_from_rows_groups_by_order():
    specs = ConstraintSpec.from_rows([(2, 0.1, 0.4, 1), (1, 0.5, 0.9, -1), (2, 0.6, 0.8, -1)])
    assert [s.deriv_order for s in specs] == [1, 2]
    assert len(specs[1]) == 2


# ------------------------------------------------------------------ fit_constrained


def test_inactive_constraints_reproduce_unconstrained_fit():
    s = noisy_samples(lambda t: t**2, 300, 0.01, 2)
    conf = SplineConfig(2, 10.0)
    fit_c, qp = fit_constrained(s, conf, ConstraintSpec(2, ((0.0, 1.0, 1),)), trace="exact")
    fit_u = fit_spline(s, conf, trace="exact")
    assert qp.n_active == 0
    assert np.max(np.abs(fit_c.values - fit_u.values)) < 1e-10
    assert fit_c.p_eff == pytest.approx(fit_u.p_eff, rel=1e-9)


def test_convexity_constraint_on_concave_data_matches_enumeration():
    n, g = 40, 14
    s = noisy_samples(lambda t: -((t - 0.5) ** 2), n, 0.05, 21)
    conf = SplineConfig(2, 1e-3, g, 0.05)
    fit, qp = fit_constrained(s, conf, ConstraintSpec(2, ((0.0, 1.0, 1),)))
    S, P = dense_spline_matrices(s.t, g, 2)
    scale = 1e-3 * n * 0.05**2 / 2
    C = np.diff(np.eye(g), n=2, axis=0)
    ref = enumerate_qp(S.T @ S + scale * P, S.T @ s.y, C)
    assert C.shape[0] == 12
    assert np.max(np.abs(fit.values - ref)) < 1e-8
    assert qp.n_active > 0


def test_constrained_fit_satisfies_constraints_and_kkt():
    s = noisy_samples(lambda t: np.sin(2 * np.pi * t), 500, 0.5, 13)
    spec = ConstraintSpec(2, ((0.0, 0.5, -1), (0.5, 1.0, 1)))
    fit, qp = fit_constrained(s, SplineConfig(2, 1e-4), spec, trace="exact")
    rows, _ = constraint_rows(spec, fit.grid, 2)
    assert np.all(rows @ (fit.values / np.std(s.y)) >= -1e-9)
    assert qp.kkt_residual <= 1e-8
    assert np.all(qp.multipliers >= 0)
    assert 2 <= fit.p_eff <= 500


def test_v_norm_dominance_with_correct_constraints():
    f = lambda t: np.sin(2 * np.pi * t)
    spec = ConstraintSpec(1, ((0.0, 0.25, 1), (0.25, 0.75, -1), (0.75, 1.0, 1)))
    for seed in range(100):
        s = noisy_samples(f, 200, 0.5, seed)
        conf = SplineConfig(2, 1e-4, 400, 0.5)
        fc, _ = fit_constrained(s, conf, spec, trace="none")
        fu = fit_spline(s, conf, trace="none")
        truth = f(fc.grid)
        rows, _ = constraint_rows(spec, fc.grid, 2)
        if np.all(rows @ truth >= 0):
            assert v_norm(truth - fc.values, s, conf) <= v_norm(truth - fu.values, s, conf) + 1e-9
