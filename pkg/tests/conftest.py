from __future__ import annotations

import numpy as np
import pytest
from scipy import sparse

from pwconvex.design import SampleSet


def noisy_samples(f, n: int, sigma: float, seed: int, *, equispaced: bool = True) -> SampleSet:
    """Samples of ``f`` with Gaussian noise at midpoints or sorted uniforms."""
    rng = np.random.default_rng(seed)
    t = (np.arange(n) + 0.5) / n if equispaced else np.sort(rng.random(n))
    return SampleSet(t, f(t) + sigma * rng.standard_normal(n), sigma)


def dense_spline_matrices(t: np.ndarray, grid_size: int, m: int):
    """Independent dense build of the discretised spline objective.

    Returns ``(S, P)`` with ``S`` the linear-interpolation map from grid to
    data and ``P = D' W D / dx^(2m)`` the trapezoid-weighted penalty, so the
    objective is ``scale f'Pf + |y - Sf|^2`` up to the factor ``1/(N sigma^2)``.
    """
    g = grid_size
    dx = 1.0 / (g - 1)
    S = np.zeros((t.size, g))
    for i, ti in enumerate(t):
        k = min(int(np.floor(ti / dx)), g - 2)
        frac = ti / dx - k
        S[i, k] += 1.0 - frac
        S[i, k + 1] += frac
    D = np.diff(np.eye(g), n=m, axis=0)
    w = np.ones(g - m)
    w[[0, -1]] = 0.5
    w /= w.sum()
    P = D.T @ np.diag(w) @ D / dx ** (2 * m)
    return S, P


def dense_fit(samples: SampleSet, grid_size: int, m: int, lam: float, sigma: float) -> np.ndarray:
    """Unconstrained spline values from the dense normal equations."""
    S, P = dense_spline_matrices(samples.t, grid_size, m)
    scale = lam * samples.n * sigma**2 / 2.0
    return np.linalg.solve(S.T @ S + scale * P, S.T @ samples.y)


def enumerate_qp(Q: np.ndarray, b: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Brute-force min of ``x'Qx/2 - b'x`` s.t. ``Cx >= 0`` over all active sets."""
    n, k = Q.shape[0], C.shape[0]
    best, best_val = None, np.inf
    for mask in range(1 << k):
        act = [i for i in range(k) if mask >> i & 1]
        A = C[act]
        kkt = np.block([[Q, -A.T], [A, np.zeros((len(act), len(act)))]])
        rhs = np.concatenate([b, np.zeros(len(act))])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        x, u = sol[:n], sol[n:]
        if np.all(C @ x >= -1e-10) and np.all(u >= -1e-10):
            val = 0.5 * x @ Q @ x - b @ x
            if val < best_val:
                best, best_val = x, val
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def to_dense(mat) -> np.ndarray:
    return mat.toarray() if sparse.issparse(mat) else np.asarray(mat)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """``report(number, ok, detail)``: log one pass/fail line, then assert ``ok``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
