"""Polynomial kernels and Gasser-Mueller type derivative estimators.

The kernel of order ``ell`` is ``kappa(s) = c (1 - s^2)^(ell + 1)`` on
``[-1, 1]``.  It integrates to one, is symmetric, and its first ``ell``
derivatives vanish at ``s = +-1``, so

    f_hat^(d)(t) = 1/(N h^(d+1)) sum_i y_i w_i kappa^(d)((t - t_i)/h) / F'(t_i)

estimates ``f^(d)`` for every ``d <= ell + 1`` on the interior ``[h, 1 - h]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import comb

import numpy as np
from numpy.polynomial import Polynomial

from .design import DesignDistribution, SampleSet, star_discrepancy, uniform

__all__ = [
    "KernelSpec",
    "KernelFit",
    "KernelMoments",
    "make_kernel",
    "gm_weights",
    "gm_estimate",
    "kernel_fit",
    "kernel_moments",
    "estimation_grid",
    "MAX_ORDER",
]

MAX_ORDER = 4


def _integrate_even_poly(coefs: list[Fraction]) -> Fraction:
    """Exact integral over [-1, 1] of a polynomial given by ascending coefficients."""
    return sum((c * Fraction(2, k + 1) for k, c in enumerate(coefs) if k % 2 == 0), Fraction(0))


def _poly_mul(a: list[Fraction], b: list[Fraction]) -> list[Fraction]:
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def _poly_deriv(a: list[Fraction]) -> list[Fraction]:
    return [k * c for k, c in enumerate(a)][1:] or [Fraction(0)]


@dataclass(frozen=True)
class KernelSpec:
    """Kernel ``c_ell (1 - s^2)^(ell+1)`` with exact derivative norms.

    ``norm_sq_exact[j]`` is ``int_{-1}^{1} |kappa^(j)(s)|^2 ds`` as a
    ``Fraction`` for ``j = 0 .. ell + 1``.
    """

    ell: int
    coefficients: tuple[Fraction, ...]
    norm_sq_exact: dict[int, Fraction] = field(repr=False)

    @property
    def poly(self) -> Polynomial:
        return Polynomial([float(c) for c in self.coefficients])

    @property
    def normalization(self) -> Fraction:
        return self.coefficients[0]

    def norm_sq(self, j: int) -> float:
        return float(self.norm_sq_exact[j])

    def norm(self, j: int) -> float:
        return float(np.sqrt(self.norm_sq(j)))

    def derivative(self, j: int) -> Polynomial:
        return self.poly.deriv(j) if j else self.poly

    def __call__(self, s, deriv: int = 0) -> np.ndarray:
        """Evaluate ``kappa^(deriv)`` with zero outside ``[-1, 1]``."""
        s = np.asarray(s, dtype=float)
        coef = self.derivative(deriv).coef
        inside = np.abs(s) <= 1.0
        x = s[inside]
        # kappa^(j) has parity (-1)^j: evaluate as a polynomial in s^2
        odd = deriv % 2
        u = x * x
        c = coef[odd::2]
        vals = np.full(u.shape, c[-1])
        for ck in c[-2::-1]:
            vals *= u
            vals += ck
        out = np.zeros(s.shape)
        out[inside] = x * vals if odd else vals
        return out


def make_kernel(ell: int) -> KernelSpec:
    """Build the order-``ell`` kernel by exact rational polynomial algebra."""
    if not isinstance(ell, (int, np.integer)) or ell < 0:
        raise ValueError("kernel order must be a nonnegative integer")
    if ell > MAX_ORDER:
        raise ValueError(f"kernel order {ell} unsupported (max {MAX_ORDER})")
    ell = int(ell)
    p = ell + 1
    base = [Fraction(0)] * (2 * p + 1)
    for k in range(p + 1):
        base[2 * k] = Fraction((-1) ** k * comb(p, k))
    c = 1 / _integrate_even_poly(base)
    coefs = [c * b for b in base]
    norms: dict[int, Fraction] = {}
    d = coefs
    for j in range(ell + 2):
        norms[j] = _integrate_even_poly(_poly_mul(d, d))
        d = _poly_deriv(d)
    return KernelSpec(ell=ell, coefficients=tuple(coefs), norm_sq_exact=norms)


@dataclass
class KernelFit:
    """Kernel estimates of ``f^(ell)`` and ``f^(ell+1)`` on an interior grid."""

    grid: np.ndarray
    values_ell: np.ndarray
    values_ell1: np.ndarray
    h: float
    ell: int


@dataclass
class KernelMoments:
    """Asymptotic variances of the ``ell`` and ``ell+1`` derivative estimates."""

    grid: np.ndarray
    sigma2: np.ndarray
    xi2: np.ndarray
    mu: float


def estimation_grid(h: float, size: int) -> np.ndarray:
    """Equispaced grid on the estimation region ``[h, 1 - h]``."""
    if not 0.0 < h < 0.5:
        raise ValueError("bandwidth must lie in (0, 1/2)")
    return np.linspace(h, 1.0 - h, size)


def _gap_weights(t: np.ndarray, dist: DesignDistribution) -> np.ndarray:
    """``w_i = N F'(t_i) (s_i - s_{i-1})`` with midpoint cell edges ``s``."""
    edges = np.concatenate(([0.0], 0.5 * (t[1:] + t[:-1]), [1.0]))
    return t.size * np.asarray(dist.pdf(t), dtype=float) * np.diff(edges)


def _check_inputs(t: np.ndarray, kernel: KernelSpec, h: float, deriv: int, grid: np.ndarray) -> None:
    if not 0.0 < h < 0.5:
        raise ValueError("bandwidth must lie in (0, 1/2)")
    if not 0 <= deriv <= kernel.ell + 1:
        raise ValueError(f"deriv must lie in 0..{kernel.ell + 1} for an order-{kernel.ell} kernel")
    tol = 1e-12
    if grid.size == 0 or grid.min() < h - tol or grid.max() > 1.0 - h + tol:
        raise ValueError("evaluation grid must lie inside [h, 1 - h]")
    counts = np.searchsorted(t, grid + h, side="right") - np.searchsorted(t, grid - h, side="left")
    if counts.min() < 2:
        raise ValueError("bandwidth too small for the design: fewer than 2 points per window")


def gm_weights(
    t: np.ndarray,
    kernel: KernelSpec,
    h: float,
    deriv: int,
    grid: np.ndarray,
    dist: DesignDistribution | None = None,
) -> np.ndarray:
    """Dense linear map ``y -> f_hat^(deriv)(grid)``, shape ``(len(grid), N)``."""
    t = np.asarray(t, dtype=float)
    grid = np.asarray(grid, dtype=float)
    dist = dist or uniform()
    _check_inputs(t, kernel, h, deriv, grid)
    n = t.size
    coef = _gap_weights(t, dist) / np.asarray(dist.pdf(t), dtype=float) / (n * h ** (deriv + 1))
    # only the samples inside each window contribute
    lo = np.searchsorted(t, grid - h, side="left")
    hi = np.searchsorted(t, grid + h, side="right")
    width = int((hi - lo).max())
    cols = np.minimum(lo[:, None] + np.arange(width)[None, :], n - 1)
    inside = np.arange(width)[None, :] < (hi - lo)[:, None]
    rows = np.broadcast_to(np.arange(grid.size)[:, None], cols.shape)
    out = np.zeros((grid.size, n))
    r, c = rows[inside], cols[inside]
    out[r, c] = kernel((grid[r] - t[c]) / h, deriv) * coef[c]
    return out


def gm_estimate(
    samples: SampleSet,
    kernel: KernelSpec,
    h: float,
    deriv: int,
    grid: np.ndarray,
    *,
    chunk: int = 1 << 18,
) -> np.ndarray:
    """Kernel estimate of ``f^(deriv)`` at each grid point.

    Rows are accumulated with numpy's pairwise summation, in chunks of at
    most ``chunk`` kernel evaluations.
    """
    grid = np.asarray(grid, dtype=float)
    t = samples.t
    _check_inputs(t, kernel, h, deriv, grid)
    n = t.size
    dens = np.asarray(samples.dist.pdf(t), dtype=float)
    yw = samples.y * _gap_weights(t, samples.dist) / dens / (n * h ** (deriv + 1))
    rows = max(1, chunk // n)
    out = np.empty(grid.size)
    for start in range(0, grid.size, rows):
        g = grid[start : start + rows]
        k = kernel((g[:, None] - t[None, :]) / h, deriv)
        out[start : start + rows] = np.sum(k * yw[None, :], axis=1)
    return out


def kernel_fit(samples: SampleSet, kernel: KernelSpec, h: float, grid: np.ndarray) -> KernelFit:
    """Estimates of ``f^(ell)`` and ``f^(ell+1)`` on ``grid``."""
    ell = kernel.ell
    return KernelFit(
        grid=np.asarray(grid, dtype=float),
        values_ell=gm_estimate(samples, kernel, h, ell, grid),
        values_ell1=gm_estimate(samples, kernel, h, ell + 1, grid),
        h=float(h),
        ell=ell,
    )


def kernel_moments(
    dist: DesignDistribution | None,
    kernel: KernelSpec,
    h: float,
    n: int,
    sigma: float,
    grid: np.ndarray,
    points: np.ndarray | None = None,
) -> KernelMoments:
    """Leading-order variances ``sigma^2 ||kappa^(ell)||^2 / (N F'(t) h^(2 ell + 1))``.

    ``mu`` is the order of the ``ell``/``ell+1`` correlation, ``h + D*/h``;
    ``D*`` is taken from ``points`` when given, otherwise ``1/N``.
    """
    dist = dist or uniform()
    grid = np.asarray(grid, dtype=float)
    if not 0.0 < h < 0.5:
        raise ValueError("bandwidth must lie in (0, 1/2)")
    if n < 1 or sigma < 0:
        raise ValueError("need N >= 1 and sigma >= 0")
    ell = kernel.ell
    dens = np.asarray(dist.pdf(grid), dtype=float)
    sigma2 = sigma**2 * kernel.norm_sq(ell) / (n * dens * h ** (2 * ell + 1))
    xi2 = sigma**2 * kernel.norm_sq(ell + 1) / (n * dens * h ** (2 * ell + 3))
    d_star = star_discrepancy(points, dist).d_star if points is not None else 1.0 / n
    return KernelMoments(grid=grid, sigma2=sigma2, xi2=xi2, mu=float(h + d_star / h))
