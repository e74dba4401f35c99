"""Measurement designs, star discrepancy and discrete/continuous integration bounds.

A design is a sequence of measurement locations ``t_1 <= ... <= t_N`` in
``[0, 1]`` whose empirical distribution ``F_N`` approaches a smooth limit
``F``.  The star discrepancy ``sup_t |F_N(t) - F(t)|`` controls how well
weighted sums over the design approximate integrals against ``dF``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import simpson

__all__ = [
    "DesignDistribution",
    "SampleSet",
    "DiscrepancyReport",
    "KoksmaGap",
    "InterpTerms",
    "uniform",
    "sinusoidal",
    "design_points",
    "star_discrepancy",
    "koksma_gap",
    "interp_inequality_terms",
    "kint1_terms",
    "integrate",
    "first_difference_sigma",
]

_MIN_PANELS = 4096


@dataclass(frozen=True)
class DesignDistribution:
    """Analytic limiting design distribution on ``[0, 1]``.

    Parameters
    ----------
    cdf, pdf : callable
        Vectorised ``F`` and ``F'``.
    c_lower, c_upper : float
        Bounds ``0 < c_F <= F'(t) <= C_F``.
    name : str
        Label used in reports and the CLI.
    """

    cdf: Callable[[np.ndarray], np.ndarray]
    pdf: Callable[[np.ndarray], np.ndarray]
    c_lower: float
    c_upper: float
    name: str = "custom"

    def __post_init__(self) -> None:
        if not 0.0 < self.c_lower <= self.c_upper:
            raise ValueError("density bounds must satisfy 0 < c_F <= C_F")

    def check(self, n: int = 1025) -> None:
        """Validate the cdf/density invariants on an evaluation grid."""
        t = np.linspace(0.0, 1.0, n)
        F = np.asarray(self.cdf(t), dtype=float)
        dens = np.asarray(self.pdf(t), dtype=float)
        if abs(F[0]) > 1e-12 or abs(F[-1] - 1.0) > 1e-12:
            raise ValueError("cdf must satisfy F(0)=0 and F(1)=1")
        if np.any(np.diff(F) < -1e-14):
            raise ValueError("cdf must be nondecreasing")
        tol = 1e-12
        if np.any(dens < self.c_lower - tol) or np.any(dens > self.c_upper + tol):
            raise ValueError("density leaves [c_F, C_F] on the evaluation grid")

    def quantile(self, u: np.ndarray) -> np.ndarray:
        """Inverse cdf by vectorised bisection (60 halvings, |error| < 1e-16)."""
        u = np.asarray(u, dtype=float)
        lo = np.zeros_like(u)
        hi = np.ones_like(u)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = np.asarray(self.cdf(mid)) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)


def uniform() -> DesignDistribution:
    return DesignDistribution(
        cdf=lambda t: np.clip(np.asarray(t, dtype=float), 0.0, 1.0),
        pdf=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        c_lower=1.0,
        c_upper=1.0,
        name="uniform",
    )


def sinusoidal(a: float = 0.5) -> DesignDistribution:
    """``F(t) = t + a sin(2 pi t) / (2 pi)`` with density ``1 + a cos(2 pi t)``."""
    if not 0.0 <= a < 1.0:
        raise ValueError("amplitude must lie in [0, 1)")
    two_pi = 2.0 * np.pi
    return DesignDistribution(
        cdf=lambda t: np.asarray(t, dtype=float) + a * np.sin(two_pi * np.asarray(t, dtype=float)) / two_pi,
        pdf=lambda t: 1.0 + a * np.cos(two_pi * np.asarray(t, dtype=float)),
        c_lower=1.0 - a,
        c_upper=1.0 + a,
        name=f"sinusoidal({a:g})",
    )


def design_points(
    n: int,
    kind: str = "equispaced",
    dist: DesignDistribution | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Measurement locations for the standard designs.

    ``equispaced`` gives ``t_i = (i - 1/2)/N``; ``iid-uniform`` sorted uniform
    draws; ``analytic-cdf`` the ``F``-quantiles of the equispaced midpoints.
    """
    if n < 1:
        raise ValueError("need at least one point")
    mids = (np.arange(1, n + 1) - 0.5) / n
    if kind == "equispaced":
        return mids
    if kind == "iid-uniform":
        if rng is None:
            raise ValueError("iid-uniform design needs a random generator")
        return np.sort(rng.random(n))
    if kind == "analytic-cdf":
        return (dist or sinusoidal()).quantile(mids)
    raise ValueError(f"unknown design kind {kind!r}")


@dataclass
class SampleSet:
    """Noisy samples ``y_i = f(t_i) + eps_i`` at sorted locations in [0, 1]."""

    t: np.ndarray
    y: np.ndarray
    sigma: float | None = None
    dist: DesignDistribution = field(default_factory=uniform)

    def __post_init__(self) -> None:
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.t.ndim != 1 or self.t.shape != self.y.shape:
            raise ValueError("t and y must be 1-d arrays of equal length")
        if self.t.size == 0:
            raise ValueError("empty sample set")
        if np.any(np.diff(self.t) < 0):
            raise ValueError("sample locations must be sorted ascending")
        if self.t[0] < 0.0 or self.t[-1] > 1.0:
            raise ValueError("sample locations must lie in [0, 1]")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def n(self) -> int:
        return self.t.size

    def noise_sd(self) -> float:
        """Known noise sd, or the first-difference estimate when unset."""
        if self.sigma is not None:
            return float(self.sigma)
        return first_difference_sigma(self.y)

    def with_y(self, y: np.ndarray) -> "SampleSet":
        return SampleSet(self.t, y, self.sigma, self.dist)


def first_difference_sigma(y: np.ndarray) -> float:
    """``sigma_hat^2 = sum (y_{i+1} - y_i)^2 / (2 (N - 1))``."""
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two responses")
    s = float(np.sqrt(np.sum(np.diff(y) ** 2) / (2.0 * (y.size - 1))))
    if s == 0.0:
        raise ValueError("responses are constant; noise level cannot be estimated")
    return s


@dataclass(frozen=True)
class DiscrepancyReport:
    d_star: float
    max_spacing: float
    min_spacing: float


def _validated_points(points: Sequence[float]) -> np.ndarray:
    t = np.asarray(points, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("points must be a nonempty 1-d sequence")
    if np.any(~np.isfinite(t)) or t.min() < 0.0 or t.max() > 1.0:
        raise ValueError("points must lie in [0, 1]")
    if np.any(np.diff(t) < 0):
        raise ValueError("points must be sorted ascending")
    return t


def star_discrepancy(
    points: Sequence[float], dist: DesignDistribution | None = None
) -> DiscrepancyReport:
    """Exact ``sup_t |F_N(t) - F(t)|`` via the breakpoint formula.

    ``D* = 1/(2N) + max_i |F(t_i) - (i - 1/2)/N|``, which is the larger of the
    one-sided jumps ``i/N - F(t_i)`` and ``F(t_i) - (i-1)/N``.
    """
    t = _validated_points(points)
    dist = dist or uniform()
    n = t.size
    F = np.asarray(dist.cdf(t), dtype=float)
    mids = (np.arange(1, n + 1) - 0.5) / n
    d_star = 0.5 / n + float(np.max(np.abs(F - mids)))
    gaps = np.diff(t)
    if gaps.size:
        return DiscrepancyReport(d_star, float(gaps.max()), float(gaps.min()))
    return DiscrepancyReport(d_star, 0.0, 0.0)


def integrate(
    func: Callable[[np.ndarray], np.ndarray],
    a: float = 0.0,
    b: float = 1.0,
    *,
    breaks: Sequence[float] = (),
    panels: int = _MIN_PANELS,
    rtol: float = 1e-10,
    max_panels: int = 1 << 20,
) -> float:
    """Composite Simpson quadrature, doubling panels until two passes agree.

    Interior ``breaks`` split the range so jump discontinuities of the
    integrand sit on panel boundaries.
    """
    edges = [a, *sorted(x for x in breaks if a < x < b), b]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        n = max(panels, _MIN_PANELS)
        prev = None
        while True:
            x = np.linspace(lo, hi, 2 * n + 1)
            # one-sided limits at the panel ends, so jumps at breaks count once
            x[0], x[-1] = np.nextafter(lo, hi), np.nextafter(hi, lo)
            val = float(simpson(np.asarray(func(x), dtype=float), x=x))
            if prev is not None and abs(val - prev) <= rtol * max(1.0, abs(val)):
                break
            if 2 * n > max_panels:
                break
            prev = val
            n *= 2
        total += val
    return total


@dataclass(frozen=True)
class KoksmaGap:
    gap: float
    bound: float
    d_star: float


def koksma_gap(
    g: Callable[[np.ndarray], np.ndarray],
    points: Sequence[float],
    weights: Sequence[float] | None = None,
    dist: DesignDistribution | None = None,
    *,
    tv_norm: float,
    sup_norm: float,
    weight_constant: float = 0.0,
    breaks: Sequence[float] = (),
) -> KoksmaGap:
    """Compare a weighted design average of ``g`` with ``int g dF``.

    The bound ``(||g||_TV + C ||g||_inf) D*`` holds whenever every weight
    satisfies ``|w_i - 1| <= C D*``; weights outside that band are rejected.
    """
    t = _validated_points(points)
    dist = dist or uniform()
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != t.shape:
        raise ValueError("weights must match points")
    d_star = star_discrepancy(t, dist).d_star
    if np.any(np.abs(w - 1.0) > weight_constant * d_star * (1 + 1e-12) + 1e-15):
        raise ValueError("weights deviate from 1 by more than C * D*")
    integral = integrate(lambda s: np.asarray(g(s)) * np.asarray(dist.pdf(s)), breaks=breaks)
    average = float(np.mean(np.asarray(g(t), dtype=float) * w))
    gap = abs(integral - average)
    bound = (tv_norm + weight_constant * sup_norm) * d_star
    return KoksmaGap(gap, bound, d_star)


@dataclass(frozen=True)
class InterpTerms:
    """Scaled derivative energies ``theta^{2j} int |g^(j)|^2`` for ``j = 0..m``."""

    lhs: np.ndarray
    l2: float
    seminorm_m: float
    raw: np.ndarray

    def ratios(self) -> np.ndarray:
        return self.lhs / (self.l2 + self.seminorm_m)


def _derivative_callables(g, m: int) -> list[Callable[[np.ndarray], np.ndarray]]:
    if isinstance(g, Polynomial):
        return [g.deriv(j) if j else g for j in range(m + 1)]
    funcs = list(g)
    if len(funcs) < m + 1:
        raise ValueError(f"need g and its first {m} derivatives")
    return funcs[: m + 1]


def interp_inequality_terms(g, m: int, theta: float) -> InterpTerms:
    """Terms of the Sobolev interpolation inequality on ``[0, 1]``.

    ``g`` is either a ``numpy.polynomial.Polynomial`` or a sequence of
    callables ``[g, g', ..., g^(m)]``.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    funcs = _derivative_callables(g, m)
    raw = np.array([integrate(lambda s, f=f: np.asarray(f(s), dtype=float) ** 2) for f in funcs])
    scale = theta ** (2.0 * np.arange(m + 1))
    lhs = scale * raw
    return InterpTerms(lhs=lhs, l2=float(raw[0]), seminorm_m=float(lhs[m]), raw=raw)


def kint1_terms(
    g, points: Sequence[float], m: int, dist: DesignDistribution | None = None
) -> dict[str, float]:
    """Pieces of the discrete-sum interpolation bound.

    Returns the design mean of ``g^2``, ``int g^2``, ``int |g^(m)|^2``, the
    star discrepancy and ``required_c1``: the smallest ``c1`` for which
    ``mean g(t_i)^2 <= (C_F + c1 + D*) int g^2 + c1 D*^m int |g^(m)|^2``.
    """
    t = _validated_points(points)
    dist = dist or uniform()
    funcs = _derivative_callables(g, m)
    d_star = star_discrepancy(t, dist).d_star
    mean_sq = float(np.mean(np.asarray(funcs[0](t), dtype=float) ** 2))
    l2 = integrate(lambda s: np.asarray(funcs[0](s), dtype=float) ** 2)
    semi = integrate(lambda s: np.asarray(funcs[m](s), dtype=float) ** 2)
    slack = mean_sq - (dist.c_upper + d_star) * l2
    required = slack / (l2 + d_star**m * semi)
    return {
        "mean_sq": mean_sq,
        "l2": l2,
        "seminorm_m": semi,
        "d_star": d_star,
        "c_upper": dist.c_upper,
        "required_c1": float(required),
    }
