"""Sign-constrained smoothing splines.

The constrained fit minimises the same discretised criterion as
:func:`~pwconvex.spline.fit_spline` subject to ``sign * D_j f >= 0`` at every
grid point of each constraint interval, where ``D_j`` is the unscaled
``j``-th difference stencil.  The quadratic programme is solved from the
unconstrained optimum: primal-dual active-set sweeps first, then, if those
stall, a dual active-set iteration (Goldfarb-Idnani) that adds the most
violated constraint and drops constraints whose multiplier would turn
negative.  Every step solves one banded KKT system, so large active sets
stay cheap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .design import SampleSet
from .errors import ConditioningError, CyclingError, NonConvergenceError
from .spline import (
    EXACT_TRACE_MAX_N,
    SplineConfig,
    SplineFit,
    SplineSystem,
    _AugmentedLU,
    _band_matvec,
    _resolve_sigma,
    assemble_fit,
    difference_matrix,
    spline_system,
)

__all__ = [
    "SignInterval",
    "ConstraintSpec",
    "QpSolution",
    "DenseQuadratic",
    "BandedQuadratic",
    "constraint_rows",
    "active_set_qp",
    "fit_constrained",
    "kkt_residual",
]

log = logging.getLogger(__name__)

FEAS_TOL = 1e-9
KKT_TOL = 1e-8
# violations smaller than this are left alone when choosing what to add
_ADD_TOL = 1e-11
# right-hand sides per solve in column traces; small blocks keep allocations cheap
_TRACE_BLOCK = 32


@dataclass(frozen=True)
class SignInterval:
    lo: float
    hi: float
    sign: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.lo < self.hi <= 1.0):
            raise ValueError(f"need 0 <= lo < hi <= 1, got [{self.lo}, {self.hi}]")
        if self.sign not in (-1, 1):
            raise ValueError("sign must be +1 or -1")


@dataclass(frozen=True)
class ConstraintSpec:
    """Sign constraints on one difference order over a set of intervals.

    Intervals are sorted on construction; touching or overlapping intervals
    of equal sign are merged.  Intervals of opposite sign may touch but not
    overlap.
    """

    deriv_order: int
    intervals: tuple[SignInterval, ...] = ()

    def __post_init__(self) -> None:
        if self.deriv_order < 0:
            raise ValueError("deriv_order must be >= 0")
        ivs = sorted(
            (iv if isinstance(iv, SignInterval) else SignInterval(*iv) for iv in self.intervals),
            key=lambda iv: (iv.lo, iv.hi),
        )
        merged: list[SignInterval] = []
        for iv in ivs:
            if merged and iv.lo <= merged[-1].hi:
                prev = merged[-1]
                if prev.sign != iv.sign:
                    if iv.lo < prev.hi:
                        raise ValueError(f"intervals {prev} and {iv} overlap with opposite signs")
                    merged.append(iv)
                    continue
                merged[-1] = SignInterval(prev.lo, max(prev.hi, iv.hi), prev.sign)
            else:
                merged.append(iv)
        object.__setattr__(self, "intervals", tuple(merged))

    def __len__(self) -> int:
        return len(self.intervals)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, float, float, int]]) -> list["ConstraintSpec"]:
        """Group ``(deriv, lo, hi, sign)`` rows into one spec per order."""
        by_order: dict[int, list[SignInterval]] = {}
        for d, lo, hi, sg in rows:
            by_order.setdefault(int(d), []).append(SignInterval(float(lo), float(hi), int(sg)))
        return [cls(d, tuple(ivs)) for d, ivs in sorted(by_order.items())]


def _as_specs(constraints: ConstraintSpec | Sequence[ConstraintSpec] | None) -> list[ConstraintSpec]:
    if constraints is None:
        return []
    if isinstance(constraints, ConstraintSpec):
        return [constraints]
    return list(constraints)


def constraint_rows(
    constraints: ConstraintSpec | Sequence[ConstraintSpec] | None,
    grid: np.ndarray,
    m: int | None = None,
) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Stacked constraint rows ``C`` and their positions on the grid.

    A row for order ``j`` sits at the stencil centre ``grid[k] + j dx / 2``
    and is kept when that centre lies inside an interval.  Positions are in
    units of the grid spacing.
    """
    grid = np.asarray(grid, dtype=float)
    g = grid.size
    dx = grid[1] - grid[0]
    blocks = []
    positions = []
    for spec in _as_specs(constraints):
        j = spec.deriv_order
        if m is not None and j > m:
            raise ValueError(f"constraint order {j} exceeds the penalty order m={m}")
        if j >= g:
            raise ValueError("constraint order too large for the grid")
        centers = grid[: g - j] + 0.5 * j * dx
        dmat = difference_matrix(g, j)
        for iv in spec.intervals:
            sel = np.flatnonzero((centers >= iv.lo - 1e-12) & (centers <= iv.hi + 1e-12))
            if sel.size == 0:
                continue
            blocks.append(iv.sign * dmat[sel])
            positions.append(sel + 0.5 * j)
    if not blocks:
        return sparse.csr_matrix((0, g)), np.zeros(0)
    return sparse.vstack(blocks, format="csr"), np.concatenate(positions)


@dataclass
class QpSolution:
    """Result of :func:`active_set_qp`.

    ``multipliers`` has one entry per constraint row (zero when inactive);
    ``objective_trace`` logs ``x'Qx/2 - b'x`` after every primal step.
    """

    values: np.ndarray
    active_set: np.ndarray
    multipliers: np.ndarray
    kkt_residual: float
    iterations: int
    objective_trace: list[float] = field(default_factory=list, repr=False)
    converged: bool = True

    @property
    def n_active(self) -> int:
        return int(self.active_set.size)


class DenseQuadratic:
    """Dense SPD quadratic form; for small problems and oracles."""

    def __init__(self, q: np.ndarray):
        self.q = np.asarray(q, dtype=float)
        if self.q.ndim != 2 or self.q.shape[0] != self.q.shape[1]:
            raise ValueError("quadratic form must be a square matrix")

    @property
    def size(self) -> int:
        return self.q.shape[0]

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.q @ x

    def abs_matvec(self, x: np.ndarray) -> np.ndarray:
        return np.abs(self.q) @ np.abs(x)

    def kkt(self, rows: sparse.csr_matrix, pos: np.ndarray) -> "_DenseKkt":
        return _DenseKkt(self.q, rows.toarray())


class _DenseKkt:
    def __init__(self, q: np.ndarray, c: np.ndarray):
        n, k = q.shape[0], c.shape[0]
        self.n = n
        self.mat = np.block([[q, c.T], [c, np.zeros((k, k))]])
        cond = np.linalg.cond(self.mat)
        if not np.isfinite(cond) or cond > 1e14:
            raise ConditioningError("KKT matrix is singular: dependent active constraints")

    def solve(self, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        full = np.zeros(self.mat.shape[0])
        full[: self.n] = rhs
        sol = np.linalg.solve(self.mat, full)
        return sol[: self.n], sol[self.n :]


class BandedQuadratic:
    """``M = scale P + S'S`` of a :class:`SplineSystem`, used matrix-free."""

    def __init__(self, system: SplineSystem, scale: float):
        self.system = system
        self.scale = scale
        self._band = system.matrix_band(scale)

    @property
    def size(self) -> int:
        return self.system.size

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.system.matvec(x, self.scale)

    def abs_matvec(self, x: np.ndarray) -> np.ndarray:
        return _band_matvec(np.abs(self._band), np.abs(x))

    def kkt(self, rows: sparse.csr_matrix, pos: np.ndarray) -> "_BandedKkt":
        return _BandedKkt(self.system, self.scale, rows, pos)


class _BandedKkt:
    def __init__(self, system: SplineSystem, scale: float, rows: sparse.csr_matrix, pos: np.ndarray):
        if rows.shape[0] == 0:
            self.lu = system.factor(scale)
        else:
            self.lu = _AugmentedLU(system, scale, rows, pos)

    def solve(self, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.lu.solve_full(grid_rhs=rhs)

    def solve_data(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.lu.solve_full(data_rhs=y)


def kkt_residual(
    quadratic, linear: np.ndarray, rows: sparse.csr_matrix, x: np.ndarray, u: np.ndarray
) -> float:
    """Relative stationarity residual ``|Qx - b - C'u|`` (max norm)."""
    grad = quadratic.matvec(x) - linear - rows.T @ u
    scale = (
        np.max(quadratic.abs_matvec(x), initial=0.0)
        + np.max(np.abs(linear), initial=0.0)
        + np.max(abs(rows.T) @ np.abs(u), initial=0.0)
    )
    return float(np.max(np.abs(grad), initial=0.0) / max(scale, 1e-300))


def _as_quadratic(quadratic):
    if isinstance(quadratic, (DenseQuadratic, BandedQuadratic)):
        return quadratic
    return DenseQuadratic(np.asarray(quadratic, dtype=float))


def _pdas(quad, b, rows, pos, cap):
    """Primal-dual active-set sweeps from the unconstrained optimum.

    Each sweep solves the equality problem on ``A = {u > 0} | {Cx < 0}``.
    Returns ``(active, x, u, kkt, converged, solves)``.
    """
    n_cons = rows.shape[0]
    u = np.zeros(n_cons)
    kkt = quad.kkt(rows[:0], pos[:0])
    x, _ = kkt.solve(b)
    active = np.zeros(0, dtype=int)
    solves = 1
    seen: set[bytes] = set()
    while solves < cap:
        slack = rows @ x
        keep = active[u[active] > 0]
        add = np.flatnonzero(slack < -_ADD_TOL)
        new = np.union1d(keep, add)
        if np.array_equal(new, active):
            return list(active), x, u, kkt, True, solves
        key = new.tobytes()
        if key in seen:
            break
        seen.add(key)
        active = new
        kkt = quad.kkt(rows[active], pos[active])
        x, q = kkt.solve(b)
        u[:] = 0.0
        u[active] = -q
        solves += 1
    return list(active), x, u, kkt, False, solves


def active_set_qp(
    quadratic,
    linear: np.ndarray,
    constraints,
    *,
    positions: np.ndarray | None = None,
    max_iter: int | None = None,
    feas_tol: float = FEAS_TOL,
    kkt_tol: float = KKT_TOL,
    warm_start: bool = True,
) -> QpSolution:
    """Minimise ``x'Qx/2 - b'x`` subject to ``C x >= 0``.

    A few primal-dual active-set sweeps run first; they usually land on
    the optimal active set in a handful of solves.  If they do not, the
    multiplier-feasible part of their last active set seeds a dual active-set
    iteration, which adds one violated constraint at a time (most violated
    first, lowest index once an active set recurs) and is guaranteed to
    terminate.

    Parameters
    ----------
    quadratic
        A dense SPD matrix, :class:`DenseQuadratic` or :class:`BandedQuadratic`.
    linear
        The vector ``b``.
    constraints
        Constraint rows ``C`` (dense or sparse).
    positions
        Grid positions of the rows; needed for the banded backend only.
    max_iter
        Cap on KKT solves, default ``10 * n_constraints + 100``.
    warm_start
        Run the primal-dual sweeps before the dual iteration.

    Raises
    ------
    NonConvergenceError
        The cap was hit; ``best`` holds the last iterate.
    CyclingError
        An active set recurred even with lowest-index selection.
    """
    quad = _as_quadratic(quadratic)
    b = np.asarray(linear, dtype=float)
    rows = sparse.csr_matrix(constraints, dtype=float)
    n_cons = rows.shape[0]
    if rows.shape[1] != quad.size or b.shape != (quad.size,):
        raise ValueError("dimensions of Q, b and C disagree")
    pos = np.zeros(n_cons) if positions is None else np.asarray(positions, dtype=float)
    cap = 10 * n_cons + 100 if max_iter is None else int(max_iter)

    def factor(act: list[int]):
        idx = np.asarray(act, dtype=int)
        return quad.kkt(rows[idx], pos[idx])

    def objective(x: np.ndarray) -> float:
        return float(0.5 * x @ quad.matvec(x) - b @ x)

    if warm_start and n_cons:
        active, x, u, kkt, done, iterations = _pdas(quad, b, rows, pos, min(cap, 30))
        # shed negative multipliers until the active set is dual feasible
        while not done and active and np.min(u[active]) < 0:
            active = [j for j in active if u[j] > 0]
            u[:] = 0.0
            kkt = factor(active)
            x, q = kkt.solve(b)
            if active:
                u[np.asarray(active)] = -q
            iterations += 1
    else:
        active, u = [], np.zeros(n_cons)
        kkt = factor(active)
        x, _ = kkt.solve(b)
        iterations = 1
    trace = [objective(x)]
    seen: set[tuple[int, ...]] = set()
    bland = False

    def snapshot(converged: bool) -> QpSolution:
        act = np.array(sorted(active), dtype=int)
        res = kkt_residual(quad, b, rows, x, u)
        return QpSolution(x.copy(), act, u.copy(), res, iterations, trace, converged)

    while True:
        slack = rows @ x
        bad = np.flatnonzero(slack < -_ADD_TOL)
        if active:
            bad = bad[~np.isin(bad, active)]
        if bad.size == 0:
            break
        p = int(bad[0]) if bland else int(bad[np.argmin(slack[bad])])
        n_p = rows[p].toarray().ravel()
        u_p = 0.0
        while True:
            if iterations >= cap:
                raise NonConvergenceError(
                    f"active-set iteration cap {cap} reached", best=snapshot(False)
                )
            z, r = kkt.solve(n_p)
            iterations += 1
            # largest dual step keeping the active multipliers nonnegative
            t2, drop = np.inf, -1
            for k, j in enumerate(active):
                if r[k] > 0:
                    ratio = u[j] / r[k]
                    if ratio < t2 or (ratio == t2 and j < active[drop]):
                        t2, drop = ratio, k
            curv = float(n_p @ z)
            s_p = float(n_p @ x)
            t1 = -s_p / curv if curv > 1e-14 * max(1.0, float(n_p @ n_p)) else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                raise ConditioningError("constraints are infeasible or linearly dependent")
            if np.isfinite(t1):
                x = x + t * z
                trace.append(objective(x))
            for k, j in enumerate(active):
                u[j] -= t * r[k]
            u_p += t
            if t1 <= t2:
                active.append(p)
                u[p] = u_p
                key = tuple(sorted(active))
                if key in seen:
                    if bland:
                        raise CyclingError("active set repeated under lowest-index rule", best=snapshot(False))
                    bland = True
                    seen.clear()
                seen.add(key)
                kkt = factor(active)
                break
            j = active.pop(drop)
            u[j] = 0.0
            kkt = factor(active)
        # re-solve on the current active set to shed accumulated rounding
        x, q = kkt.solve(b)
        if active:
            u[np.asarray(active)] = -q
        iterations += 1

    neg = [j for j in active if u[j] < 0]
    if neg:
        log.debug("clipping %d slightly negative multipliers", len(neg))
        u[neg] = 0.0
    sol = snapshot(True)
    if sol.kkt_residual > kkt_tol:
        raise NonConvergenceError(f"KKT residual {sol.kkt_residual:.2e} above tolerance", best=sol)
    if np.any(rows @ x < -feas_tol):
        raise NonConvergenceError("returned point violates a constraint", best=sol)
    return sol


def fit_constrained(
    samples: SampleSet,
    config: SplineConfig,
    constraints: ConstraintSpec | Sequence[ConstraintSpec] | None,
    *,
    trace: str = "auto",
    probes: int = 64,
    seed: int = 0,
) -> tuple[SplineFit, QpSolution]:
    """Sign-constrained minimiser of the discretised penalised criterion.

    ``y`` is rescaled to unit standard deviation before solving so the
    feasibility tolerance is absolute on a standard scale.  ``p_eff`` is the
    trace of the influence matrix with the final active constraints held as
    equalities (exact column solves up to 2000 samples, else Hutchinson);
    ``trace="none"`` skips it and leaves ``p_eff`` as NaN.
    """
    sigma = _resolve_sigma(samples, config)
    system = spline_system(samples.t, config.resolved_grid(samples.n), config.m)
    scale = system.penalty_scale(config.lam, sigma)
    rows, pos = constraint_rows(constraints, system.grid, config.m)
    ysd = float(np.std(samples.y))
    ysd = ysd if ysd > 0 else 1.0
    quad = BandedQuadratic(system, scale)
    qp = active_set_qp(quad, system.St @ (samples.y / ysd), rows, positions=pos)
    kkt = quad.kkt(rows[qp.active_set], pos[qp.active_set])
    values, _ = kkt.solve_data(samples.y)
    qp.values = qp.values * ysd
    qp.multipliers = qp.multipliers * ysd
    if qp.n_active == 0 and trace != "none":
        p_eff = system.hat_trace(scale, trace, probes, seed)
    else:
        p_eff = _constrained_trace(kkt, system, trace, probes, seed)
    return assemble_fit(system, values, samples.y, config.lam, sigma, p_eff), qp


def _constrained_trace(kkt: _BandedKkt, system: SplineSystem, method: str, probes: int, seed: int) -> float:
    n = system.n
    if method == "none":
        return float("nan")
    if method == "auto":
        method = "exact" if n <= EXACT_TRACE_MAX_N else "hutchinson"
    if method == "exact":
        total = 0.0
        for start in range(0, n, _TRACE_BLOCK):
            stop = min(n, start + _TRACE_BLOCK)
            e = np.zeros((n, stop - start))
            e[np.arange(start, stop), np.arange(stop - start)] = 1.0
            f, _ = kkt.solve_data(e)
            total += float(np.sum((system.S[start:stop] @ f).diagonal()))
        return total
    if method == "hutchinson":
        z = np.random.default_rng(seed).choice([-1.0, 1.0], size=(n, probes))
        f, _ = kkt.solve_data(z)
        return float(np.mean(np.sum(z * (system.S @ f), axis=0)))
    raise ValueError(f"unknown trace method {method!r}")
