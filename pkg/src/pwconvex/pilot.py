"""Two-stage pilot estimator for piecewise convex functions.

Stage one smooths strongly with a kernel estimator, locates the sign
changes of ``f_hat^(ell)`` and turns each odd cluster into an interval on
which ``f^(ell+1)`` must keep one sign.  Stage two is a smoothing spline at
the GCV smoothing level, fitted subject to those sign constraints.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.polynomial import Polynomial

from .changepoints import ChangePointReport, extract_change_points
from .constrained import ConstraintSpec, QpSolution, SignInterval, fit_constrained
from .design import DesignDistribution, SampleSet, uniform
from .errors import ConditioningError, NonConvergenceError
from .kernels import KernelFit, KernelSpec, _gap_weights, estimation_grid, kernel_fit, make_kernel
from .spline import SplineConfig, SplineFit, fit_spline, gcv_select

__all__ = [
    "PilotConfig",
    "PilotResult",
    "IntervalRecord",
    "WidthRule",
    "CenteringResult",
    "first_stage_bandwidth",
    "inflation_factor",
    "default_inflation_scale",
    "center_polynomial",
    "kernel_gcv_bandwidth",
    "constraint_intervals",
    "pilot_fit",
    "shift_fit",
]

log = logging.getLogger(__name__)

def default_inflation_scale(ell: int) -> float:
    """Constant in front of ``iota(N)``: 0.075 for ``ell <= 1``, times 2.5 per extra order."""
    return 0.075 * 2.5 ** max(0, ell - 1)


def inflation_factor(n: int, ell: int) -> float:
    """``ln(N) N^(1/(2 ell + 1) - 1/(2 ell + 3))``."""
    alpha = 1.0 / (2 * ell + 1) - 1.0 / (2 * ell + 3)
    return math.log(n) * n**alpha


def first_stage_bandwidth(
    n: int, ell: int, h_gcv: float, *, scale: float = 1.0, h_max: float = 0.4
) -> float:
    """Inflated bandwidth ``min(h_max, scale * iota(N) * h_gcv)``."""
    if n < 10:
        raise ValueError("need N >= 10")
    if not 0.0 < h_gcv < 0.5:
        raise ValueError("h_gcv must lie in (0, 1/2)")
    return float(min(h_max, scale * inflation_factor(n, ell) * h_gcv))


@dataclass(frozen=True)
class WidthRule:
    """``sigma_multiple`` (``value`` = c_w), ``midpoint`` or ``fixed`` (``value`` = w)."""

    kind: str = "sigma_multiple"
    value: float = 3.0

    def __post_init__(self) -> None:
        if self.kind not in ("sigma_multiple", "midpoint", "fixed"):
            raise ValueError(f"unknown width rule {self.kind!r}")
        if self.kind == "sigma_multiple" and self.value < 1:
            raise ValueError("c_w must be >= 1")
        if self.kind == "fixed" and not self.value > 0:
            raise ValueError("fixed width must be positive")

    @classmethod
    def parse(cls, text: str) -> "WidthRule":
        """Parse ``sigma:3``, ``midpoint`` or ``fixed:0.1``."""
        head, _, arg = text.strip().partition(":")
        head = {"sigma": "sigma_multiple"}.get(head, head)
        if head == "midpoint":
            return cls("midpoint", 0.0)
        if head in ("sigma_multiple", "fixed") and arg:
            return cls(head, float(arg))
        if head == "sigma_multiple":
            return cls()
        raise ValueError(f"cannot parse width rule {text!r}")


@dataclass
class PilotConfig:
    """Settings of :func:`pilot_fit`.

    ``m=None`` means ``ell + 1``; ``center=None`` centres when ``ell >= 1``;
    ``first_stage_h`` and ``second_stage_lambda`` are picked automatically
    when ``None``.  The first-stage bandwidth is
    ``min(h_max, inflation_scale * iota(N) * h_gcv)``; ``inflation_scale=None``
    uses :func:`default_inflation_scale`.
    """

    ell: int = 1
    m: int | None = None
    first_stage_h: float | None = None
    inflation_scale: float | None = None
    h_max: float = 0.4
    width_rule: WidthRule = field(default_factory=WidthRule)
    alpha: float = 0.05
    center: bool | None = None
    second_stage_lambda: float | None = None
    grid_size: int | None = None
    sigma: float | None = None
    trace: str = "auto"

    def __post_init__(self) -> None:
        if isinstance(self.width_rule, str):
            self.width_rule = WidthRule.parse(self.width_rule)
        if self.ell < 0:
            raise ValueError("ell must be >= 0")
        if self.m is None:
            self.m = self.ell + 1
        if self.m < max(2, self.ell + 1):
            raise ValueError("need m >= max(2, ell + 1) so deriv ell+1 constraints are admissible")
        if self.center is None:
            self.center = self.ell >= 1
        if self.inflation_scale is None:
            self.inflation_scale = default_inflation_scale(self.ell)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 < self.h_max < 0.5:
            raise ValueError("h_max must lie in (0, 1/2)")


@dataclass
class IntervalRecord:
    x_hat: float
    sigma_if: float
    lo: float
    hi: float
    sign: int
    parity: str
    deriv: int


@dataclass
class CenteringResult:
    residual_samples: SampleSet
    coefficients: np.ndarray

    @property
    def poly(self) -> Polynomial:
        return Polynomial(self.coefficients)


@dataclass
class PilotResult:
    """Outcome of :func:`pilot_fit`.

    ``second_stage`` is on the original scale (centering undone);
    ``unconstrained`` is the GCV spline at the same smoothing level.
    """

    first_stage: KernelFit
    report: ChangePointReport
    constraints: list[ConstraintSpec]
    intervals: list[IntervalRecord]
    second_stage: SplineFit
    qp: QpSolution | None
    unconstrained: SplineFit
    centering_poly: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def constrained(self) -> bool:
        return bool(self.diagnostics.get("constrained", False))

    @property
    def k_odd(self) -> int:
        return sum(r.parity == "odd" for r in self.intervals)


def center_polynomial(samples: SampleSet, ell: int) -> CenteringResult:
    """Remove the least-squares polynomial of degree ``ell`` from ``y``.

    The normal equations carry a ``1e-12`` ridge (relative to their trace)
    so repeated locations cannot make them singular.
    """
    if samples.n < ell + 1:
        raise ValueError("need N >= ell + 1")
    v = np.vander(samples.t, ell + 1, increasing=True)
    gram = v.T @ v
    gram[np.diag_indices_from(gram)] += 1e-12 * np.trace(gram) / (ell + 1)
    coef = np.linalg.solve(gram, v.T @ samples.y)
    # one refinement step recovers the accuracy lost to the ridge
    coef += np.linalg.solve(gram, v.T @ (samples.y - v @ coef))
    return CenteringResult(samples.with_y(samples.y - v @ coef), coef)


def shift_fit(fit: SplineFit, coefficients: np.ndarray, t: np.ndarray) -> SplineFit:
    """Add a polynomial (ascending coefficients) to a fit sampled at ``t``."""
    if not np.any(coefficients):
        return fit
    poly = Polynomial(coefficients)
    values = fit.values + poly(fit.grid)
    deriv = {j: (v + poly.deriv(j)(fit.grid)) if j else values for j, v in fit.deriv.items()}
    return replace(fit, values=values, deriv=deriv, fitted=fit.fitted + poly(t))


def _window_smoother(
    t: np.ndarray, rows: np.ndarray, kernel: KernelSpec, h: float, coef: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Windowed kernel weights of the points ``t[rows]`` (deriv 0).

    Returns ``(idx, w)`` with ``idx[i, k]`` the sample index and ``w`` its
    weight, zero outside the window.
    """
    x = t[rows]
    lo = np.searchsorted(t, x - h, side="left")
    hi = np.searchsorted(t, x + h, side="right")
    width = int((hi - lo).max())
    idx = np.minimum(lo[:, None] + np.arange(width)[None, :], t.size - 1)
    inside = np.arange(width)[None, :] < (hi - lo)[:, None]
    w = np.where(inside, kernel((x[:, None] - t[idx]) / h) * coef[idx] / h, 0.0)
    return idx, w


def kernel_gcv_bandwidth(
    samples: SampleSet,
    kernel: KernelSpec,
    h_grid: Sequence[float] | None = None,
    *,
    region: float = 0.2,
    rule: str = "largest-local",
) -> tuple[float, bool]:
    """Bandwidth minimising ``(RSS/n)/(1 - p/n)^2`` of the kernel smoother.

    All bandwidths are scored on the same points, those in
    ``[region, 1 - region]``, so the scores are comparable.  The score is
    flat near its minimum and noise often adds spurious minima at small
    ``h``; ``rule="largest-local"`` returns the largest local minimiser,
    ``rule="global"`` the global one.  Returns the chosen bandwidth and
    whether it sits on the edge of ``h_grid``.
    """
    t, y = samples.t, samples.y
    n = samples.n
    if h_grid is None:
        h_grid = np.geomspace(min(3.0 / n, region / 2), region, 25)
    hs = np.asarray(h_grid, dtype=float)
    if np.any(hs <= 0) or np.any(hs > region):
        raise ValueError("bandwidths must lie in (0, region]")
    rows = np.flatnonzero((t >= region) & (t <= 1.0 - region))
    if rows.size < 3:
        raise ValueError("too few samples inside the scoring region")
    coef = _gap_weights(t, samples.dist) / np.asarray(samples.dist.pdf(t), dtype=float) / n
    scores = np.full(hs.size, np.inf)
    for k, h in enumerate(hs):
        # chunks of rows keep the window arrays small
        chunk = max(16, (1 << 18) // max(1, int(2.0 * h * n) + 2))
        fitted = np.empty(rows.size)
        p, degenerate = 0.0, False
        for start in range(0, rows.size, chunk):
            sub = rows[start : start + chunk]
            idx, w = _window_smoother(t, sub, kernel, h, coef)
            if np.any(np.count_nonzero(w, axis=1) < 2):
                degenerate = True
                break
            fitted[start : start + chunk] = np.sum(w * y[idx], axis=1)
            p += float(np.sum(np.where(idx == sub[:, None], w, 0.0)))
        if degenerate or p >= rows.size:
            continue
        rss = float(np.sum((y[rows] - fitted) ** 2))
        scores[k] = rss / rows.size / (1.0 - p / rows.size) ** 2
    if not np.any(np.isfinite(scores)):
        raise ValueError("no admissible bandwidth on the grid")
    k = int(np.argmin(scores))
    if rule == "largest-local":
        padded = np.concatenate(([np.inf], scores, [np.inf]))
        local = np.flatnonzero((scores <= padded[:-2]) & (scores <= padded[2:]) & np.isfinite(scores))
        k = int(local[-1])
    elif rule != "global":
        raise ValueError(f"unknown rule {rule!r}")
    return float(hs[k]), k in (0, hs.size - 1)


def _crossings(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    s = np.sign(values)
    idx = np.flatnonzero(s[:-1] * s[1:] < 0)
    a, b = values[idx], values[idx + 1]
    return grid[idx] + (grid[idx + 1] - grid[idx]) * a / (a - b)


def constraint_intervals(
    report: ChangePointReport,
    fit: KernelFit,
    rule: WidthRule | str,
    h: float,
    n: int,
    *,
    sigma: float | None = None,
    dist: DesignDistribution | None = None,
) -> tuple[list[ConstraintSpec], list[IntervalRecord], list[str]]:
    """Constraint intervals for every cluster of ``report``.

    Odd clusters get a one-sign constraint on ``f^(ell+1)``.  The interval is
    ``x_hat +- w`` (widened to cover the cluster) cut back to halfway towards
    the nearest zeros of ``f_hat^(ell+1)`` outside the cluster and halfway
    towards the neighbouring clusters, then clipped to ``[h, 1 - h]``.  The
    ``midpoint`` rule uses those cut points directly.  Its sign is that of
    the increment of ``f_hat^(ell)`` across it.  Even clusters get a
    one-sign constraint on ``f^(ell)`` over their span.

    When ``sigma`` is given, only zeros of ``f_hat^(ell+1)`` where
    ``|f_hat^(ell)|`` exceeds three standard deviations count: extrema of
    the true ``f^(ell)`` between change points have signal-sized values,
    while noise extrema next to a crossing stay near zero.

    Returns the specs, one record per interval and any warnings.
    """
    rule = WidthRule.parse(rule) if isinstance(rule, str) else rule
    ell = fit.ell
    grid = fit.grid
    lo_region, hi_region = float(grid[0]), float(grid[-1])
    zeros = _crossings(grid, fit.values_ell1)
    if sigma is not None and zeros.size:
        kernel = make_kernel(ell)
        dens = np.asarray((dist or uniform()).pdf(zeros), dtype=float)
        sd = sigma * kernel.norm(ell) / np.sqrt(n * dens * h ** (2 * ell + 1))
        zeros = zeros[np.abs(np.interp(zeros, grid, fit.values_ell)) > 3.0 * sd]
    clusters = report.clusters
    records: list[IntervalRecord] = []
    warnings: list[str] = []

    def value_ell(x: float) -> float:
        return float(np.interp(x, grid, fit.values_ell))

    for ci, cl in enumerate(clusters):
        span_lo, span_hi = cl.span
        if not cl.is_odd:
            left_val = value_ell(max(lo_region, span_lo - 1e-9))
            sign = 1 if left_val >= 0 else -1
            lo, hi = max(span_lo, lo_region), min(span_hi, hi_region)
            if hi > lo:
                records.append(IntervalRecord(0.5 * (lo + hi), float("nan"), lo, hi, sign, "even", ell))
            continue
        rep = report.points[cl.representative()]
        x = rep.x_hat
        left_z = zeros[zeros < span_lo]
        right_z = zeros[zeros > span_hi]
        u_left = left_z[-1] if left_z.size else 0.0
        u_right = right_z[0] if right_z.size else 1.0
        lo_cap = 0.5 * (span_lo + u_left)
        hi_cap = 0.5 * (span_hi + u_right)
        if ci > 0:
            lo_cap = max(lo_cap, 0.5 * (span_lo + clusters[ci - 1].span[1]))
        if ci + 1 < len(clusters):
            hi_cap = min(hi_cap, 0.5 * (span_hi + clusters[ci + 1].span[0]))
        if rule.kind == "midpoint":
            lo, hi = lo_cap, hi_cap
        else:
            if rule.kind == "fixed":
                w = rule.value
            else:
                sif = rep.sigma_if_hat
                if not np.isfinite(sif):
                    raise ValueError("sigma_multiple widths need sigma_if estimates on the report")
                w = max(rule.value * sif * math.sqrt(2.0 * math.log(n)), 2.0 * h)
            lo = max(min(x - w, span_lo), lo_cap)
            hi = min(max(x + w, span_hi), hi_cap)
        lo, hi = max(lo, lo_region), min(hi, hi_region)
        if not hi > lo:
            warnings.append(f"interval around {x:.4g} is empty after clipping")
            continue
        inc = value_ell(hi) - value_ell(lo)
        sign = 1 if inc >= 0 else -1
        records.append(IntervalRecord(x, rep.sigma_if_hat, lo, hi, sign, "odd", ell + 1))

    specs: list[ConstraintSpec] = []
    for deriv in (ell + 1, ell):
        chosen = [r for r in records if r.deriv == deriv]
        chosen.sort(key=lambda r: r.lo)
        ivs: list[SignInterval] = []
        for r in chosen:
            if ivs and r.lo <= ivs[-1].hi:
                prev = ivs[-1]
                warnings.append(f"intervals near {r.x_hat:.4g} overlap; merged")
                if prev.sign == r.sign:
                    ivs[-1] = SignInterval(prev.lo, max(prev.hi, r.hi), prev.sign)
                    continue
                cut = 0.5 * (r.lo + prev.hi)
                ivs[-1] = SignInterval(prev.lo, cut, prev.sign)
                ivs.append(SignInterval(cut, r.hi, r.sign))
                continue
            ivs.append(SignInterval(r.lo, r.hi, r.sign))
        if ivs:
            specs.append(ConstraintSpec(deriv, tuple(ivs)))
    return specs, records, warnings


def _first_stage_grid(h: float) -> np.ndarray:
    size = max(401, int(math.ceil(4.0 * (1.0 - 2.0 * h) / h)) + 3)
    return estimation_grid(h, size)


def pilot_fit(samples: SampleSet, config: PilotConfig | None = None) -> PilotResult:
    """Run the two-stage estimator on ``samples``.

    Falls back to the unconstrained GCV spline (``diagnostics["constrained"]``
    false, reason in ``diagnostics["fallback"]``) when the QP fails or the
    first stage finds more than ``N/10`` sign changes.
    """
    cfg = config or PilotConfig()
    n = samples.n
    if n < 30:
        raise ValueError("pilot estimation needs N >= 30")
    ell, m = cfg.ell, int(cfg.m)
    diag: dict = {"flags": [], "fallback": None}

    if cfg.center:
        cen = center_polynomial(samples, ell)
        work, coefs = cen.residual_samples, cen.coefficients
    else:
        work, coefs = samples, np.zeros(1)
    sigma = cfg.sigma if cfg.sigma is not None else work.noise_sd()

    kernel = make_kernel(ell)
    if cfg.first_stage_h is None:
        h_gcv, edge = kernel_gcv_bandwidth(work, kernel)
        if edge:
            diag["flags"].append("h_gcv_on_grid_edge")
        h = first_stage_bandwidth(n, ell, h_gcv, scale=cfg.inflation_scale, h_max=cfg.h_max)
        if h >= cfg.h_max:
            diag["flags"].append("h_capped")
    else:
        h_gcv, h = float("nan"), float(cfg.first_stage_h)
    diag["h_gcv"], diag["h_used"] = h_gcv, h

    first = kernel_fit(work, kernel, h, _first_stage_grid(h))
    report = extract_change_points(first, sigma=sigma, n=n, kernel=kernel, dist=work.dist, alpha=cfg.alpha)
    diag["k_hat"] = report.k_hat
    diag["parity_flags"] = [c.parity for c in report.clusters]

    sconf = SplineConfig(m=m, grid_size=cfg.grid_size, sigma=sigma)
    if cfg.second_stage_lambda is None:
        gcv = gcv_select(work, sconf)
        lam, unconstrained = gcv.lambda_star, gcv.fit
    else:
        lam = float(cfg.second_stage_lambda)
        unconstrained = fit_spline(work, sconf.with_lam(lam), trace=cfg.trace)
    diag["lambda_used"] = lam

    specs: list[ConstraintSpec] = []
    records: list[IntervalRecord] = []
    qp = None
    second = unconstrained
    if report.k_hat > n / 10:
        diag["fallback"] = "oversegmented first stage"
    else:
        specs, records, warns = constraint_intervals(
            report, first, cfg.width_rule, h, n, sigma=sigma, dist=work.dist
        )
        diag["flags"].extend(warns)
        if specs:
            try:
                second, qp = fit_constrained(work, sconf.with_lam(lam), specs, trace=cfg.trace)
            except (NonConvergenceError, ConditioningError) as exc:
                log.warning("constrained fit failed, using unconstrained: %s", exc)
                diag["fallback"] = f"qp failure: {exc}"
    diag["constrained"] = diag["fallback"] is None
    diag["widths"] = [(r.hi - r.lo) / 2.0 for r in records]

    second = shift_fit(second, coefs, samples.t)
    unconstrained = shift_fit(unconstrained, coefs, samples.t)
    return PilotResult(first, report, specs, records, second, qp, unconstrained, coefs, diag)
