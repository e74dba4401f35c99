"""Information criteria and model search over the number of change points.

For a fit with ``p`` effective parameters, ``K`` change points and
normalised residual ``s2 = sum (y_i - f_hat(t_i))^2 / (N sigma^2)``:

    d_I  = s2 / (1 - g1 p / N)^2
    d_B  = s2 (1 + g2 p ln N / N)
    PCIC = s2 (1 + g2 K ln N / N) / (1 - g1 p / N)^2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .changepoints import extract_change_points
from .constrained import ConstraintSpec, SignInterval, fit_constrained
from .design import SampleSet
from .errors import ConditioningError, NonConvergenceError
from .kernels import kernel_fit, make_kernel
from .pilot import PilotConfig, _first_stage_grid
from .spline import SplineConfig, SplineFit, gcv_select

__all__ = [
    "CriterionInput",
    "Candidate",
    "SelectionResult",
    "criterion_dI",
    "criterion_dB",
    "criterion_pcic",
    "sigma_hat2",
    "select_model",
    "candidate_locations",
    "cone_constraints",
    "candidate_fits",
]


@dataclass(frozen=True)
class CriterionInput:
    sigma_hat2: float
    p: float
    K: int
    N: int
    gamma1: float = 1.0
    gamma2: float = 2.0

    def __post_init__(self) -> None:
        if self.sigma_hat2 < 0:
            raise ValueError("sigma_hat2 must be >= 0")
        if self.p < 0 or self.K < 0 or self.N < 1:
            raise ValueError("need p >= 0, K >= 0, N >= 1")
        if self.gamma1 <= 0 or self.gamma2 <= 0:
            raise ValueError("gamma1 and gamma2 must be positive")


def _inflation(c: CriterionInput) -> float:
    frac = c.gamma1 * c.p / c.N
    return math.inf if frac >= 1.0 else 1.0 / (1.0 - frac) ** 2


def criterion_dI(c: CriterionInput) -> float:
    """``s2 / (1 - gamma1 p / N)^2``; ``+inf`` once ``gamma1 p >= N``."""
    return c.sigma_hat2 * _inflation(c)


def criterion_dB(c: CriterionInput) -> float:
    """``s2 (1 + gamma2 p ln N / N)``."""
    return c.sigma_hat2 * (1.0 + c.gamma2 * c.p * math.log(c.N) / c.N)


def criterion_pcic(c: CriterionInput) -> float:
    """``s2 (1 + gamma2 K ln N / N) / (1 - gamma1 p / N)^2``."""
    return c.sigma_hat2 * (1.0 + c.gamma2 * c.K * math.log(c.N) / c.N) * _inflation(c)


def sigma_hat2(samples: SampleSet, fit: SplineFit) -> float:
    """Residual mean square normalised by the fit's noise level."""
    return float(np.sum((samples.y - fit.fitted) ** 2) / (samples.n * fit.sigma**2))


@dataclass
class Candidate:
    fit: SplineFit
    K: int
    locations: tuple[float, ...] = ()
    label: str = ""


@dataclass
class SelectionResult:
    best_index: int
    table: list[dict] = field(default_factory=list)
    candidates: list[Candidate] = field(default_factory=list)

    @property
    def best(self) -> Candidate:
        return self.candidates[self.best_index]


def select_model(
    samples: SampleSet,
    candidates: Sequence[Candidate],
    *,
    gamma1: float = 1.0,
    gamma2: float = 2.0,
) -> SelectionResult:
    """PCIC-minimising candidate; ties go to smaller ``K``, then larger ``lam``."""
    if not candidates:
        raise ValueError("need at least one candidate")
    table = []
    for c in candidates:
        s2 = sigma_hat2(samples, c.fit)
        inp = CriterionInput(s2, c.fit.p_eff, c.K, samples.n, gamma1, gamma2)
        table.append({"K": c.K, "p": c.fit.p_eff, "sigma_hat2": s2, "pcic": criterion_pcic(inp), "lam": c.fit.lam})
    order = sorted(range(len(table)), key=lambda i: (table[i]["pcic"], table[i]["K"], -table[i]["lam"]))
    return SelectionResult(order[0], table, list(candidates))


def candidate_locations(
    samples: SampleSet,
    ell: int,
    kmax: int,
    *,
    config: PilotConfig | None = None,
    shrink: float = 0.75,
) -> list[tuple[float, float]]:
    """Ranked candidate change points ``(location, strength)``.

    Sign changes of ``f_hat^(ell)`` are collected over the bandwidths
    ``h_max, shrink h_max, ...`` until ``kmax`` points are found, keeping
    one representative per odd cluster and dropping points within twice the
    current bandwidth of one already found.  Points found at a coarser scale
    rank first; within a scale the strength ``|f_hat^(ell+1)(x)| / sigma_if(x)``
    decides.
    """
    cfg = config or PilotConfig(ell=ell, center=False)
    kernel = make_kernel(ell)
    sigma = cfg.sigma if cfg.sigma is not None else samples.noise_sd()
    found: list[tuple[float, float]] = []
    h = cfg.h_max
    while len(found) < kmax:
        try:
            fit = kernel_fit(samples, kernel, h, _first_stage_grid(h))
        except ValueError:
            break
        report = extract_change_points(fit, sigma=sigma, n=samples.n, kernel=kernel, dist=samples.dist)
        level = []
        for pt in report.representatives:
            if any(abs(pt.x_hat - x) < 2 * h for x, _ in found):
                continue
            strength = abs(pt.slope) / pt.sigma_if_hat if np.isfinite(pt.sigma_if_hat) else 0.0
            level.append((pt.x_hat, strength))
        found.extend(sorted(level, key=lambda r: -r[1]))
        h *= shrink
    return found


def cone_constraints(
    locations: Sequence[float], ell: int, first_sign: int
) -> ConstraintSpec:
    """Global cone: ``f^(ell)`` alternates sign across sorted ``locations``."""
    xs = sorted(float(x) for x in locations)
    edges = [0.0] + xs + [1.0]
    ivs = []
    sign = first_sign
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi > lo:
            ivs.append(SignInterval(lo, hi, sign))
        sign = -sign
    return ConstraintSpec(ell, tuple(ivs))


def candidate_fits(
    samples: SampleSet,
    ell: int,
    kmax: int,
    *,
    m: int | None = None,
    lam: float | None = None,
    config: PilotConfig | None = None,
    trace: str = "auto",
) -> list[Candidate]:
    """One cone-constrained spline per ``K = 0 .. kmax``.

    The ``K`` strongest candidate locations define the cone; its first sign is
    the one giving the smaller residual of the two possible patterns.  All
    candidates share one smoothing level (GCV of the unconstrained spline
    unless ``lam`` is given).  ``trace`` applies to the candidates' ``p`` and
    to GCV; ``"none"`` leaves ``p`` as NaN and GCV on ``"auto"``.  Candidates
    whose QP fails are skipped.
    """
    m = ell + 1 if m is None else m
    sconf = SplineConfig(m=m, sigma=samples.noise_sd())
    if lam is None:
        lam = gcv_select(samples, sconf, trace="auto" if trace == "none" else trace).lambda_star
    sconf = sconf.with_lam(lam)
    ranked = candidate_locations(samples, ell, kmax, config=config)
    out: list[Candidate] = []
    for k in range(kmax + 1):
        if k > len(ranked):
            break
        locs = tuple(sorted(x for x, _ in ranked[:k]))
        best = None
        for first in (1, -1):
            try:
                fit, _ = fit_constrained(samples, sconf, cone_constraints(locs, ell, first), trace="none")
            except (NonConvergenceError, ConditioningError):
                continue
            if best is None or fit.rss < best[0].rss:
                best = (fit, first)
        if best is None:
            continue
        fit, first = best
        if trace != "none":
            fit, _ = fit_constrained(samples, sconf, cone_constraints(locs, ell, first), trace=trace)
        out.append(Candidate(fit, k, locs, f"K={k}"))
    return out
