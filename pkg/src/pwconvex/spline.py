"""Grid-discretised smoothing splines.

A fitted function is a vector of values on ``G`` equispaced grid points in
``[0, 1]``.  The roughness penalty is the trapezoidal quadrature of the
squared ``m``-th scaled finite difference, and the data term uses linear
interpolation ``S`` from the grid to the sample locations, so the objective

    VP[f] = (lam/2) int |f^(m)|^2 + 1/(N sigma^2) sum_i (y_i - (S f)_i)^2

becomes the banded system ``((lam N sigma^2 / 2) P + S'S) f = S'y``.

That system is not solved through its normal equations, whose rounding
error grows with the ratio of penalty to data weight.  Instead the weighted
differences ``g = scale W D f`` and residuals ``r = y - S f`` join ``f`` as
unknowns, giving a sparse system that is banded once all unknowns are
ordered by position, and that is factored by banded LU.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, cholesky_banded, lapack

from .design import SampleSet
from .errors import ConditioningError

__all__ = [
    "SplineConfig",
    "SplineFit",
    "SplineSystem",
    "GcvResult",
    "default_grid_size",
    "difference_matrix",
    "spline_system",
    "fit_spline",
    "gcv_select",
    "default_lambda_grid",
    "v_norm",
    "grid_derivative",
    "EXACT_TRACE_MAX_N",
]

EXACT_TRACE_MAX_N = 2000
# penalty/data weight ratio beyond which the solve is refused
_MAX_STIFFNESS = 1e20
# above this ratio the Cholesky based trace loses accuracy and column
# solves are used instead
_CHOLESKY_TRACE_STIFFNESS = 1e12


def default_grid_size(n: int) -> int:
    return int(min(4096, max(256, 2 * n)))


@dataclass
class SplineConfig:
    """Penalty order ``m``, smoothing parameter ``lam``, grid size and noise sd.

    ``grid_size=None`` picks ``max(256, 2N)`` capped at 4096; ``sigma=None``
    uses the samples' sigma or the first-difference estimate.
    """

    m: int = 2
    lam: float = 1e-4
    grid_size: int | None = None
    sigma: float | None = None

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("penalty order m must be >= 1")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.grid_size is not None and self.grid_size < 4 * self.m:
            raise ValueError("grid_size must be at least 4m")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def resolved_grid(self, n: int) -> int:
        return self.grid_size or default_grid_size(n)

    def with_lam(self, lam: float) -> "SplineConfig":
        return SplineConfig(self.m, lam, self.grid_size, self.sigma)


def difference_matrix(size: int, k: int) -> sparse.csr_matrix:
    """Unscaled ``k``-th forward differences, shape ``(size - k, size)``."""
    if k == 0:
        return sparse.identity(size, format="csr")
    stencil = [(-1) ** (k - i) * comb(k, i) for i in range(k + 1)]
    return sparse.diags(stencil, list(range(k + 1)), shape=(size - k, size), format="csr")


def _lower_band(mat: sparse.spmatrix, bw: int) -> np.ndarray:
    """Lower banded storage ``ab[d, j] = A[j + d, j]`` of a symmetric matrix."""
    n = mat.shape[0]
    ab = np.zeros((bw + 1, n))
    for d in range(bw + 1):
        ab[d, : n - d] = mat.diagonal(-d)
    return ab


def _band_matvec(ab: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Product of a symmetric lower-banded matrix with a vector or matrix."""
    out = ab[0][:, None] * x if x.ndim == 2 else ab[0] * x
    for d in range(1, ab.shape[0]):
        band = ab[d, :-d]
        if x.ndim == 2:
            band = band[:, None]
        out[d:] += band * x[:-d]
        out[:-d] += band * x[d:]
    return out


def grid_derivative(values: np.ndarray, j: int, grid: np.ndarray) -> np.ndarray:
    """``j``-th scaled finite difference mapped back onto the grid.

    Differences sit at cell centres ``grid[i] + j*dx/2``; they are linearly
    interpolated to the grid with constant extension at the ends.  Works
    column-wise for 2-d ``values``.
    """
    if j == 0:
        return np.array(values, dtype=float, copy=True)
    dx = grid[1] - grid[0]
    d = np.diff(values, n=j, axis=0) / dx**j
    centers = grid[: grid.size - j] + 0.5 * j * dx
    if d.ndim == 1:
        return np.interp(grid, centers, d)
    idx = np.clip(np.searchsorted(centers, grid) - 1, 0, centers.size - 2)
    w = np.clip((grid - centers[idx]) / dx, 0.0, 1.0)[:, None]
    return (1 - w) * d[idx] + w * d[idx + 1]


class SplineSystem:
    """Design-dependent pieces of the discretised problem.

    Holds the grid, the penalty band ``P``, the interpolation map ``S`` and
    ``S'S``; all independent of ``y`` and ``lam`` so one instance serves
    every replicate on a fixed design.
    """

    def __init__(self, t: np.ndarray, grid_size: int, m: int):
        t = np.asarray(t, dtype=float)
        if t.size < m + 1:
            raise ValueError(f"need at least m + 1 = {m + 1} samples")
        if grid_size < 4 * m:
            raise ValueError("grid_size must be at least 4m")
        self.t = t
        self.m = m
        self.grid = np.linspace(0.0, 1.0, grid_size)
        self.dx = 1.0 / (grid_size - 1)
        g = grid_size
        self.quad_weights = np.ones(g - m)
        self.quad_weights[[0, -1]] = 0.5
        self.quad_weights /= self.quad_weights.sum()
        self.D = difference_matrix(g, m)
        pen = self.D.T @ sparse.diags(self.quad_weights) @ self.D / self.dx ** (2 * m)
        self.P_band = _lower_band(pen.tocsr(), m)

        pos = np.clip(t / self.dx, 0.0, g - 1.0)
        left = np.minimum(np.floor(pos).astype(int), g - 2)
        frac = pos - left
        rows = np.repeat(np.arange(t.size), 2)
        cols = np.stack([left, left + 1], axis=1).ravel()
        vals = np.stack([1.0 - frac, frac], axis=1).ravel()
        self.S = sparse.csr_matrix((vals, (rows, cols)), shape=(t.size, g))
        self.St = self.S.T.tocsr()
        self.StS_band = _lower_band((self.St @ self.S).tocsr(), m)
        self._factors: dict[float, _AugmentedLU] = {}
        self._traces: dict[tuple[float, str], float] = {}
        self._pattern: dict | None = None

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def size(self) -> int:
        return self.grid.size

    def penalty_scale(self, lam: float, sigma: float) -> float:
        """``lam N sigma^2 / 2``, rounded to 12 digits so caches hit reliably."""
        return float(f"{lam * self.n * sigma**2 / 2.0:.12g}")

    def matrix_band(self, scale: float) -> np.ndarray:
        return scale * self.P_band + self.StS_band

    def _augmented_pattern(self) -> dict:
        """Scale-free sparsity pattern and band order of the augmented system."""
        if self._pattern is not None:
            return self._pattern
        g, m, n = self.size, self.m, self.n
        ng = g - m
        og, orr, of = 0, ng, ng + n
        D = self.D.tocoo()
        S = self.S.tocoo()
        ar = np.arange
        rows = np.concatenate([og + ar(ng), og + D.row, orr + ar(n), orr + S.row, of + D.col, of + S.col])
        cols = np.concatenate([og + ar(ng), of + D.col, orr + ar(n), of + S.col, og + D.row, orr + S.row])
        vals = np.concatenate([np.zeros(ng), -D.data, np.ones(n), S.data, D.data, -S.data])
        # key = 8 * position + block kind; positions are multiples of 1/2
        pos = np.concatenate([ar(ng) + m / 2.0, self.t / self.dx, ar(g, dtype=float)])
        keys = pos * 8.0 + np.repeat([0.0, 1.0, 2.0], [ng, n, g])
        order = np.argsort(keys, kind="stable")
        inv = np.empty(order.size, dtype=int)
        inv[order] = ar(order.size)
        self._pattern = {
            "shape": (ng, n, g),
            "rows": rows,
            "cols": cols,
            "vals": vals,
            "inv": inv,
            "sorted_keys": keys[order],
        }
        return self._pattern

    def stiffness(self, scale: float) -> float:
        return scale * self.P_band[0].max() / max(self.StS_band[0].max(), 1e-300)

    def factor(self, scale: float) -> _AugmentedLU:
        """Banded LU of the augmented system for ``scale`` (cached)."""
        lu = self._factors.get(scale)
        if lu is not None:
            return lu
        if not scale > 0:
            raise ConditioningError("the penalty scale must be positive; lambda = 0 is refused")
        stiff = self.stiffness(scale)
        if stiff > _MAX_STIFFNESS:
            raise ConditioningError(
                f"lambda too large for a {self.size}-point grid (stiffness {stiff:.1e})"
            )
        lu = _AugmentedLU(self, scale)
        if len(self._factors) > 64:
            self._factors.clear()
        self._factors[scale] = lu
        return lu

    def solve(self, rhs: np.ndarray, scale: float) -> np.ndarray:
        """``M^-1 rhs`` for ``M = scale P + S'S``."""
        return self.factor(scale).solve(grid_rhs=rhs)

    def smooth(self, y: np.ndarray, scale: float) -> np.ndarray:
        """Grid values for one response vector or a ``(N, R)`` block."""
        return self.factor(scale).solve(data_rhs=y)

    def matvec(self, x: np.ndarray, scale: float) -> np.ndarray:
        return _band_matvec(self.matrix_band(scale), x)

    def penalty(self, values: np.ndarray) -> np.ndarray:
        """``int |f^(m)|^2`` by the trapezoidal rule, per column."""
        d = (self.D @ values) / self.dx**self.m
        if d.ndim == 1:
            return float(np.dot(self.quad_weights, d**2))
        return self.quad_weights @ d**2

    def hat_trace(self, scale: float, method: str = "auto", probes: int = 64, seed: int = 0) -> float:
        """Trace of the data-space influence matrix ``S M^-1 S'``.

        ``exact`` uses the band of ``M^-1`` from the Cholesky factor
        (selected inversion), or column solves when the system is too stiff
        for Cholesky; ``hutchinson`` averages Rademacher probes.  ``auto`` is
        exact except for stiff systems with more than ``EXACT_TRACE_MAX_N``
        samples, which use ``hutchinson``; ``none`` returns NaN.
        ``cholesky`` forces selected inversion, whose relative error grows
        like ``1e-16 * stiffness``.
        """
        if method == "none":
            return float("nan")
        if method == "auto":
            if self.stiffness(scale) <= _CHOLESKY_TRACE_STIFFNESS:
                method = "cholesky"
            else:
                method = "exact" if self.n <= EXACT_TRACE_MAX_N else "hutchinson"
        key = (scale, method)
        if key in self._traces:
            return self._traces[key]
        if method == "exact":
            if self.stiffness(scale) <= _CHOLESKY_TRACE_STIFFNESS:
                val = self._exact_trace(scale)
            else:
                val = self._column_trace(scale)
        elif method == "cholesky":
            val = self._exact_trace(scale)
        elif method == "hutchinson":
            rng = np.random.default_rng(seed)
            z = rng.choice([-1.0, 1.0], size=(self.n, probes))
            sz = self.S @ self.solve(self.St @ z, scale)
            val = float(np.mean(np.sum(z * sz, axis=0)))
        else:
            raise ValueError(f"unknown trace method {method!r}")
        self._traces[key] = val
        return val

    def _column_trace(self, scale: float, block: int = 32) -> float:
        total = 0.0
        st = self.St.tocsc()
        for start in range(0, self.n, block):
            cols = st[:, start : start + block].toarray()
            total += float(np.sum((self.S[start : start + block] @ self.solve(cols, scale)).diagonal()))
        return total

    def _exact_trace(self, scale: float) -> float:
        try:
            cb = cholesky_banded(self.matrix_band(scale), lower=True)
        except LinAlgError as exc:
            raise ConditioningError(f"banded system is not positive definite: {exc}") from exc
        bw = cb.shape[0] - 1
        g = cb.shape[1]
        diag = cb[0]
        inv_d = (1.0 / diag**2).tolist()
        # unit lower factor, lt[k][i] = L[i+k, i] / L[i, i]
        lt = [(cb[k] / diag).tolist() for k in range(bw + 1)]
        band = [[0.0] * g for _ in range(bw + 1)]  # band[d][i] = Sigma[i, i+d]
        for i in range(g - 1, -1, -1):
            kmax = min(bw, g - 1 - i)
            for d in range(kmax, -1, -1):
                j = i + d
                acc = inv_d[i] if d == 0 else 0.0
                for k in range(1, kmax + 1):
                    r = i + k
                    off = j - r
                    acc -= lt[k][i] * (band[off][r] if off >= 0 else band[-off][j])
                band[d][i] = acc
        sig0 = np.array(band[0])
        sig1 = np.array(band[1])
        sts = self.StS_band
        return float(np.dot(sig0, sts[0]) + 2.0 * np.dot(sig1[:-1], sts[1, :-1]))


class _AugmentedLU:
    """LU factors of the position-ordered augmented system.

    Unknowns are ``g`` (``G - m``), ``r`` (``N``), ``f`` (``G``) and,
    optionally, multipliers ``q`` for equality rows ``C f = c``:

        E g - D f = 0,   r + S f = y,   D'g - S'r + C'q = b,   C f = c,

    with ``E = (scale W)^-1``.  Eliminating ``g`` and ``r`` leaves
    ``M f + C'q = S'y + b``, so ``b = 0`` gives the smoother and ``y = 0``
    gives ``f = M^-1 b``.  ``cons_pos`` places each row of ``C`` on the grid
    (in units of the spacing) for the band ordering.
    """

    def __init__(
        self,
        system: SplineSystem,
        scale: float,
        cons: sparse.spmatrix | None = None,
        cons_pos: np.ndarray | None = None,
    ):
        base = system._augmented_pattern()
        ng, n, g = base["shape"]
        k = 0 if cons is None else cons.shape[0]
        self.shape = (ng, n, g, k)
        self.offsets = (0, ng, ng + n, ng + n + g)
        nb = ng + n + g
        size = nb + k
        w = system.quad_weights / system.dx ** (2 * system.m)
        vals = base["vals"].copy()
        vals[:ng] = 1.0 / (scale * w)
        rows, cols = base["rows"], base["cols"]
        self.inv = base["inv"]
        if k:
            # merge the constraint rows into the cached position order
            cpos = np.asarray(cons_pos, dtype=float) * 8.0 + 3.0
            corder = np.argsort(cpos, kind="stable")
            crank = np.empty(k, dtype=int)
            crank[corder] = np.arange(k)
            keys = base["sorted_keys"]
            inv = self.inv + np.searchsorted(cpos[corder], keys, side="left")[self.inv]
            cinv = crank + np.searchsorted(keys, cpos, side="right")
            self.inv = np.concatenate([inv, cinv])
            C = cons.tocoo()
            of, oq = self.offsets[2], nb
            rows = np.concatenate([rows, of + C.col, oq + C.row])
            cols = np.concatenate([cols, oq + C.row, of + C.col])
            vals = np.concatenate([vals, C.data, C.data])
        r, c = self.inv[rows], self.inv[cols]
        diff = r - c
        self.kl = int(max(0, diff.max()))
        self.ku = int(max(0, -diff.min()))
        ab = np.zeros((2 * self.kl + self.ku + 1, size), order="F")
        ab[self.kl + self.ku + diff, c] = vals
        self.lu, self.piv, info = lapack.dgbtrf(ab, self.kl, self.ku, overwrite_ab=True)
        if info != 0:
            raise ConditioningError(f"augmented system is singular (info={info})")
        self.size = size

    def _block(self, k: int) -> np.ndarray:
        return self.inv[self.offsets[k] + np.arange(self.shape[k])]

    def solve_full(
        self,
        *,
        data_rhs: np.ndarray | None = None,
        grid_rhs: np.ndarray | None = None,
        cons_rhs: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(f, q)`` for the given right-hand-side blocks."""
        given = [(1, data_rhs), (2, grid_rhs), (3, cons_rhs)]
        trailing = next(np.shape(v)[1:] for _, v in given if v is not None)
        b = np.zeros((self.size,) + trailing)
        for blk, v in given:
            if v is not None:
                b[self._block(blk)] = v
        x, info = lapack.dgbtrs(self.lu, self.kl, self.ku, b, self.piv)
        if info != 0:
            raise ConditioningError(f"banded solve failed (info={info})")
        return x[self._block(2)], x[self._block(3)]

    def solve(self, *, data_rhs: np.ndarray | None = None, grid_rhs: np.ndarray | None = None) -> np.ndarray:
        return self.solve_full(data_rhs=data_rhs, grid_rhs=grid_rhs)[0]


@lru_cache(maxsize=16)
def _cached_system(key: bytes, grid_size: int, m: int) -> SplineSystem:
    return SplineSystem(np.frombuffer(key, dtype=float), grid_size, m)


def spline_system(t: np.ndarray, grid_size: int, m: int) -> SplineSystem:
    """Shared :class:`SplineSystem` for a design (LRU cached)."""
    t = np.ascontiguousarray(t, dtype=float)
    return _cached_system(t.tobytes(), int(grid_size), int(m))


@dataclass
class SplineFit:
    """Fitted grid function with finite-difference derivatives and diagnostics."""

    grid: np.ndarray
    values: np.ndarray
    deriv: dict[int, np.ndarray]
    p_eff: float
    rss: float
    vp_value: float
    lam: float
    m: int
    sigma: float
    fitted: np.ndarray = field(repr=False)
    n: int = 0

    def evaluate(self, t: np.ndarray, j: int = 0) -> np.ndarray:
        return np.interp(t, self.grid, self.deriv[j] if j in self.deriv else grid_derivative(self.values, j, self.grid))


def _resolve_sigma(samples: SampleSet, config: SplineConfig) -> float:
    if config.sigma is not None:
        return float(config.sigma)
    return samples.noise_sd()


def assemble_fit(
    system: SplineSystem,
    values: np.ndarray,
    y: np.ndarray,
    lam: float,
    sigma: float,
    p_eff: float,
) -> SplineFit:
    fitted = system.S @ values
    rss = float(np.sum((y - fitted) ** 2))
    vp = lam / 2.0 * system.penalty(values) + rss / (system.n * sigma**2)
    deriv = {j: grid_derivative(values, j, system.grid) for j in range(system.m + 1)}
    return SplineFit(
        grid=system.grid,
        values=values,
        deriv=deriv,
        p_eff=p_eff,
        rss=rss,
        vp_value=float(vp),
        lam=lam,
        m=system.m,
        sigma=sigma,
        fitted=fitted,
        n=system.n,
    )


def fit_spline(samples: SampleSet, config: SplineConfig, *, trace: str = "auto") -> SplineFit:
    """Unconstrained minimiser of the discretised penalised criterion."""
    sigma = _resolve_sigma(samples, config)
    system = spline_system(samples.t, config.resolved_grid(samples.n), config.m)
    scale = system.penalty_scale(config.lam, sigma)
    values = system.smooth(samples.y, scale)
    return assemble_fit(system, values, samples.y, config.lam, sigma, system.hat_trace(scale, trace))


def default_lambda_grid(n: int, m: int, sigma: float, size: int = 41) -> np.ndarray:
    """Log-spaced ``lam`` whose equivalent bandwidths span ``1/N`` to ``1/2``."""
    bw = np.geomspace(1.0 / n, 0.5, size)
    return 2.0 * bw ** (2 * m) / sigma**2


@dataclass
class GcvResult:
    lambda_star: float
    lambdas: np.ndarray
    score_curve: np.ndarray
    p_curve: np.ndarray
    fit: SplineFit


def gcv_select(
    samples: SampleSet,
    config: SplineConfig,
    lambda_grid: Sequence[float] | None = None,
    *,
    trace: str = "auto",
) -> GcvResult:
    """Minimise ``(RSS/N) / (1 - p/N)^2`` over ``lambda_grid``.

    Values of ``lam`` where the system is ill-conditioned or ``p >= N`` score
    ``+inf``.  Exact ties go to the larger ``lam``.  For very stiff systems
    that provably cannot win (their score exceeds the best one even with the
    minimal ``p = m``) the curves hold the cheaper selected-inversion trace.
    """
    sigma = _resolve_sigma(samples, config)
    n = samples.n
    lams = np.asarray(
        default_lambda_grid(n, config.m, sigma) if lambda_grid is None else lambda_grid, dtype=float
    )
    if lams.size == 0 or np.any(lams <= 0):
        raise ValueError("lambda grid must be nonempty and positive")
    system = spline_system(samples.t, config.resolved_grid(n), config.m)
    scores = np.full(lams.size, np.inf)
    ps = np.full(lams.size, np.nan)
    rss = np.full(lams.size, np.nan)
    method = ("exact" if n <= EXACT_TRACE_MAX_N else "auto") if trace == "auto" else trace
    deferred = []
    for k, lam in enumerate(lams):
        scale = system.penalty_scale(lam, sigma)
        try:
            values = system.smooth(samples.y, scale)
        except ConditioningError:
            continue
        rss[k] = float(np.sum((samples.y - system.S @ values) ** 2))
        if method == "exact" and system.stiffness(scale) > _CHOLESKY_TRACE_STIFFNESS:
            deferred.append(k)
            continue
        ps[k] = system.hat_trace(scale, method)
        if ps[k] < n:
            scores[k] = rss[k] / n / (1.0 - ps[k] / n) ** 2
    # stiff systems need slow column solves for an exact trace; skip them
    # when even the smallest possible p (= m) cannot beat the best score
    for k in deferred:
        scale = system.penalty_scale(lams[k], sigma)
        bound = rss[k] / n / (1.0 - config.m / n) ** 2
        if np.isfinite(scores).any() and bound > scores.min():
            try:
                ps[k] = max(float(config.m), system.hat_trace(scale, "cholesky"))
            except ConditioningError:
                ps[k] = float(config.m)
        else:
            ps[k] = system.hat_trace(scale, "exact")
        if ps[k] < n:
            scores[k] = max(bound, rss[k] / n / (1.0 - ps[k] / n) ** 2)
    if not np.any(np.isfinite(scores)):
        raise ValueError("every lambda on the grid was excluded (p >= N or ill-conditioned)")
    best = np.flatnonzero(scores == scores.min())
    k = best[np.argmax(lams[best])]
    lam = float(lams[k])
    fit = fit_spline(samples, SplineConfig(config.m, lam, config.grid_size, sigma), trace=trace)
    return GcvResult(lam, lams, scores, ps, fit)


def v_norm(values: np.ndarray, samples: SampleSet, config: SplineConfig) -> float:
    """Squared V-norm ``(lam/2) int |g^(m)|^2 + 1/(N sigma^2) sum g(t_i)^2``.

    Uses the same quadrature and interpolation as the fit, so it equals
    ``(2/(N sigma^2))`` times the quadratic form of the banded system.
    """
    sigma = _resolve_sigma(samples, config)
    system = spline_system(samples.t, config.resolved_grid(samples.n), config.m)
    values = np.asarray(values, dtype=float)
    if values.shape != (system.size,):
        raise ValueError("grid function does not match the spline grid")
    at_data = system.S @ values
    return config.lam / 2.0 * system.penalty(values) + float(np.sum(at_data**2)) / (samples.n * sigma**2)
