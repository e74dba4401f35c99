"""Empirical change points of kernel derivative estimates.

An ``ell``-change point of ``f`` is a sign change of ``f^(ell)``.  The
helpers here locate sign changes of a kernel estimate, group nearby ones
into clusters, and evaluate the Gaussian-noise formulas for the spread of a
detected change point and for the expected number of spurious ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfcx, ndtri

from .design import DesignDistribution, uniform
from .kernels import KernelFit, KernelSpec

__all__ = [
    "ChangePoint",
    "Cluster",
    "ChangePointReport",
    "extract_change_points",
    "sign_change_count",
    "h_function",
    "sigma_if",
    "expected_false_changepoints",
    "false_cp_prob_bound",
    "false_cp_bound_from_sigma_if",
    "uncertainty_interval",
]

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class ChangePoint:
    x_hat: float
    sign_flip: int
    sigma_if_hat: float = float("nan")
    uncertainty: tuple[float, float] | None = None
    cluster_id: int = -1
    slope: float = float("nan")


@dataclass
class Cluster:
    members: list[int]
    parity: str
    span: tuple[float, float]

    @property
    def is_odd(self) -> bool:
        return self.parity == "odd"

    def representative(self) -> int:
        """Median member; only meaningful for odd clusters."""
        return self.members[len(self.members) // 2]


@dataclass
class ChangePointReport:
    """All sign changes of ``f_hat^(ell)`` plus their clustering.

    ``k_hat`` counts every sign change on the grid.  Odd clusters stand for
    genuine change points; ``representatives`` lists one point per odd
    cluster and ``k_odd`` counts them.
    """

    points: list[ChangePoint] = field(default_factory=list)
    clusters: list[Cluster] = field(default_factory=list)
    h: float = float("nan")

    @property
    def k_hat(self) -> int:
        return len(self.points)

    @property
    def representatives(self) -> list[ChangePoint]:
        return [self.points[c.representative()] for c in self.clusters if c.is_odd]

    @property
    def k_odd(self) -> int:
        return sum(c.is_odd for c in self.clusters)

    @property
    def even_clusters(self) -> list[Cluster]:
        return [c for c in self.clusters if not c.is_odd]


def _resolved_signs(values: np.ndarray) -> np.ndarray | None:
    """Signs with exact zeros taking the sign of the next nonzero entry."""
    s = np.sign(values)
    nz = np.flatnonzero(s)
    if nz.size == 0:
        return None
    # index of the next nonzero entry at or after each position
    nxt = np.searchsorted(nz, np.arange(s.size), side="left")
    trailing = nxt == nz.size
    nxt[trailing] = nz.size - 1
    return s[nz[nxt]]


def sign_change_count(values: np.ndarray) -> int:
    """Number of sign changes of a sequence, ignoring exact zeros."""
    s = np.sign(np.asarray(values, dtype=float))
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


def extract_change_points(
    fit: KernelFit,
    *,
    sigma: float | None = None,
    n: int | None = None,
    kernel: KernelSpec | None = None,
    dist: DesignDistribution | None = None,
    alpha: float = 0.05,
    merge_radius: float | None = None,
) -> ChangePointReport:
    """Locate and cluster the sign changes of ``fit.values_ell``.

    Crossings are placed by linear interpolation between adjacent grid
    points.  Crossings closer than ``merge_radius`` (default ``2h``) share a
    cluster.  When ``sigma``, ``n`` and ``kernel`` are given each point also
    carries its estimated spread and ``alpha`` uncertainty interval (``None``
    when the corrected tail level reaches one).
    """
    grid = np.asarray(fit.grid, dtype=float)
    v = np.asarray(fit.values_ell, dtype=float)
    h = float(fit.h)
    if grid.size >= 2 and np.max(np.diff(grid)) >= h / 4:
        raise ValueError("grid too coarse: spacing must be below h/4")
    report = ChangePointReport(h=h)
    s = _resolved_signs(v)
    if s is None:
        return report
    idx = np.flatnonzero(s[1:] != s[:-1])
    v1 = np.asarray(fit.values_ell1, dtype=float)
    dist = dist or uniform()
    for i in idx:
        a, b = v[i], v[i + 1]
        frac = a / (a - b) if a != b else 0.0
        x = grid[i] + (grid[i + 1] - grid[i]) * frac
        slope = v1[i] + (v1[i + 1] - v1[i]) * frac
        report.points.append(ChangePoint(x_hat=float(x), sign_flip=int(s[i + 1]), slope=float(slope)))

    if not report.points:
        return report
    radius = 2.0 * h if merge_radius is None else merge_radius
    members: list[int] = [0]
    groups = []
    for k in range(1, len(report.points)):
        if report.points[k].x_hat - report.points[k - 1].x_hat <= radius:
            members.append(k)
        else:
            groups.append(members)
            members = [k]
    groups.append(members)
    for cid, mem in enumerate(groups):
        span = (report.points[mem[0]].x_hat, report.points[mem[-1]].x_hat)
        report.clusters.append(Cluster(mem, "odd" if len(mem) % 2 else "even", span))
        for k in mem:
            report.points[k].cluster_id = cid

    if sigma is not None and n is not None and kernel is not None:
        for p in report.points:
            dens = float(np.asarray(dist.pdf(np.array([p.x_hat])))[0])
            if p.slope == 0.0:
                p.sigma_if_hat = float("inf")
                continue
            p.sigma_if_hat = sigma_if(p.slope, kernel, h, n, sigma, density=dens)
            try:
                p.uncertainty = uncertainty_interval(p, alpha, kernel, h)
            except ValueError:
                # spread so large relative to h that no interval is meaningful
                p.uncertainty = None
    return report


def h_function(z: float | np.ndarray) -> float | np.ndarray:
    """``H(z) = phi(z)/z + Phi(z) - 1`` for ``z > 0``.

    Written as ``phi(z) (1/z - R(z))`` with the Mills ratio
    ``R(z) = sqrt(pi/2) erfcx(z/sqrt(2))`` so the tail stays accurate.
    """
    z_arr = np.asarray(z, dtype=float)
    if np.any(~(z_arr > 0)):
        raise ValueError("H is defined for z > 0 only")
    phi = np.exp(-0.5 * z_arr**2) / _SQRT_2PI
    mills = np.sqrt(np.pi / 2.0) * erfcx(z_arr / np.sqrt(2.0))
    out = phi * (1.0 / z_arr - mills)
    return float(out) if np.ndim(z) == 0 else out


def sigma_if(
    slope: float,
    kernel: KernelSpec,
    h: float,
    n: int,
    sigma: float,
    *,
    density: float = 1.0,
) -> float:
    """Standard deviation of a detected change point.

    ``sigma ||kappa^(ell)|| / (|f^(ell+1)(x)| sqrt(N F'(x) h^(2 ell + 1)))``.
    ``slope`` is ``f^(ell+1)`` at the change point; zero is rejected since
    the change point is then not a transversal crossing.
    """
    if slope == 0 or not np.isfinite(slope):
        raise ValueError("f^(ell+1) must be finite and nonzero at a change point")
    ell = kernel.ell
    return float(sigma * kernel.norm(ell) / (abs(slope) * np.sqrt(n * density * h ** (2 * ell + 1))))


def _densities(dist: DesignDistribution | None, locations: np.ndarray) -> np.ndarray:
    return np.asarray((dist or uniform()).pdf(locations), dtype=float)


def expected_false_changepoints(
    locations: Sequence[float],
    slopes: Sequence[float],
    kernel: KernelSpec,
    h: float,
    n: int,
    sigma: float,
    dist: DesignDistribution | None = None,
) -> float:
    """Asymptotic ``E[K_hat] - K`` for a kernel estimate in Gaussian noise.

    ``2 sum_k H(sqrt(|f^(ell+1)(x_k)|^2 N F'(x_k) h^(2 ell + 3) / (sigma^2 ||kappa^(ell+1)||^2)))``
    """
    x = np.asarray(locations, dtype=float)
    a = np.abs(np.asarray(slopes, dtype=float))
    if x.shape != a.shape:
        raise ValueError("locations and slopes must align")
    if np.any(a == 0):
        raise ValueError("f^(ell+1) must be nonzero at every change point")
    if x.size == 0:
        return 0.0
    if sigma == 0:
        return 0.0
    ell = kernel.ell
    z = np.sqrt(a**2 * n * _densities(dist, x) * h ** (2 * ell + 3) / (sigma**2 * kernel.norm_sq(ell + 1)))
    return float(2.0 * np.sum(h_function(z)))


def false_cp_bound_from_sigma_if(sigma_ifs: Sequence[float], h: float, w: float) -> float:
    s = np.asarray(sigma_ifs, dtype=float)
    return float(np.sum(s / h * np.exp(-(w**2) / (2.0 * s**2))))


def false_cp_prob_bound(
    locations: Sequence[float],
    slopes: Sequence[float],
    kernel: KernelSpec,
    h: float,
    n: int,
    sigma: float,
    w: float,
    dist: DesignDistribution | None = None,
) -> float:
    """Diagnostic tail bound on a false change point farther than ``w`` away.

    Returns ``sum_k (sigma_if/h) exp(-w^2 / (2 sigma_if^2))`` with the
    unknown leading constant set to one, so the value is indicative only.
    """
    ell = kernel.ell
    if not h / w < 1:
        raise ValueError("need h < w")
    if w**2 * n * h ** (2 * ell + 1) < 1:
        raise ValueError("need w^2 N h^(2 ell + 1) >= 1")
    x = np.asarray(locations, dtype=float)
    dens = _densities(dist, x)
    sifs = [sigma_if(s, kernel, h, n, sigma, density=d) for s, d in zip(slopes, dens)]
    return false_cp_bound_from_sigma_if(sifs, h, w)


def uncertainty_interval(
    point: ChangePoint, alpha: float, kernel: KernelSpec, h: float
) -> tuple[float, float]:
    """``x_hat +- z sigma_if`` with ``z`` the two-sided normal quantile.

    The tail level is ``alpha [1 + 2 H(h ||kappa^(ell)|| / (sigma_if ||kappa^(ell+1)||))]``,
    capped at 0.5.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    s = point.sigma_if_hat
    if not (s > 0 and np.isfinite(s)):
        raise ValueError("change point has no finite positive sigma_if")
    ell = kernel.ell
    arg = h * kernel.norm(ell) / (s * kernel.norm(ell + 1))
    level = alpha * (1.0 + 2.0 * h_function(arg))
    if level >= 1.0:
        raise ValueError("corrected quantile level reached 1")
    level = min(level, 0.5)
    z = float(ndtri(1.0 - level / 2.0))
    return (point.x_hat - z * s, point.x_hat + z * s)
