"""Monte Carlo experiments: analytic truths, seeded data and aggregate reports.

Every replicate draws its randomness from a Philox generator keyed by
``(seed, N, replicate, purpose)``, so results do not depend on execution
order or on the number of worker processes.  Aggregates are reduced in
replicate order and written as CSV with a leading config-hash line.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy import integrate, sparse, stats

from .changepoints import expected_false_changepoints, extract_change_points, sign_change_count
from .constrained import ConstraintSpec, constraint_rows, fit_constrained
from .design import SampleSet, design_points, sinusoidal, uniform
from .errors import ConditioningError, NonConvergenceError
from .kernels import KernelFit, estimation_grid, gm_weights, make_kernel
from .pilot import PilotConfig, WidthRule, kernel_gcv_bandwidth, pilot_fit
from .selection import cone_constraints
from .spline import SplineConfig, fit_spline, gcv_select, v_norm

__all__ = [
    "Truth",
    "make_truth",
    "TRUTHS",
    "ReplicateStream",
    "generate",
    "ParamRule",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "ReplicateResult",
    "NRecord",
    "SimulationReport",
    "run_replicate",
    "run_experiment",
    "mise_rate",
    "RateFit",
]

SPLINE_DELTA = 0.05
_PURPOSES = {"design": 1, "noise": 2, "estimator": 3}
_CP_GRID = 20001
_CURVE_POINTS = 257


# --------------------------------------------------------------------- truths


@dataclass(frozen=True)
class Truth:
    """Test function with analytic derivatives.

    ``deriv(t, j)`` evaluates ``f^(j)``; ``zeros(j)`` lists the sign changes
    of ``f^(j)`` inside ``(0, 1)`` in closed form or to root-finder accuracy.
    """

    name: str
    deriv: Callable[[np.ndarray, int], np.ndarray] = field(repr=False)
    zeros: Callable[[int], np.ndarray] = field(repr=False)

    def __call__(self, t) -> np.ndarray:
        return self.deriv(np.asarray(t, dtype=float), 0)

    def change_points(self, ell: int, lo: float = 0.0, hi: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """``ell``-change points in ``[lo, hi]`` and ``f^(ell+1)`` there."""
        x = np.asarray(self.zeros(ell), dtype=float)
        x = x[(x >= lo) & (x <= hi)]
        return x, self.deriv(x, ell + 1)


def _sine(freq: float) -> Truth:
    if not freq > 0:
        raise ValueError("sine frequency must be positive")
    w = 2.0 * math.pi * freq

    def deriv(t, j):
        return w**j * np.sin(w * np.asarray(t, dtype=float) + 0.5 * j * math.pi)

    def zeros(j):
        # w t + j pi/2 = k pi
        k = np.arange(math.floor(j / 2.0) + 1, math.ceil(2.0 * freq + j / 2.0))
        x = (k - j / 2.0) / (2.0 * freq)
        return x[(x > 0.0) & (x < 1.0)]

    return Truth(f"sine{{{freq:g}}}", deriv, zeros)


def _poly_truth(name: str, poly: Polynomial) -> Truth:
    def deriv(t, j):
        return poly.deriv(j)(np.asarray(t, dtype=float)) if j else poly(np.asarray(t, dtype=float))

    def zeros(j):
        p = poly.deriv(j) if j else poly
        if p.degree() < 1:
            return np.empty(0)
        r = p.roots()
        r = np.sort(r[np.abs(r.imag) < 1e-12].real)
        r = r[(r > 0.0) & (r < 1.0)]
        # keep roots of odd multiplicity only (true sign changes)
        keep = [x for x in r if np.sign(p(x - 1e-7)) != np.sign(p(x + 1e-7))]
        return np.unique(np.round(np.asarray(keep, dtype=float), 14))

    return Truth(name, deriv, zeros)


def _cubic() -> Truth:
    u = Polynomial([-0.45, 1.0])
    return _poly_truth("cubic", 10.0 * u**3 - 2.0 * u)


def _piecewise_poly(breaks: Sequence[float], ell: int) -> Truth:
    """Polynomial whose ``ell``-th derivative changes sign exactly at ``breaks``."""
    b = sorted(float(x) for x in breaks)
    if not b or any(not 0.0 < x < 1.0 for x in b) or len(set(b)) != len(b):
        raise ValueError("breaks must be distinct points inside (0, 1)")
    p = Polynomial([1.0])
    for x in b:
        p = p * Polynomial([-x, 1.0])
    p = p.integ(ell) if ell else p
    scale = np.max(np.abs(p(np.linspace(0.0, 1.0, 4097))))
    return _poly_truth(f"piecewise-poly{{{','.join(f'{x:g}' for x in b)}}}", p / scale)


def _logistic(rate: float, center: float) -> Truth:
    """``1 / (1 + exp(-rate (t - center)))``; derivatives as polynomials in ``s = f``."""
    if not rate > 0 or not 0.0 < center < 1.0:
        raise ValueError("logistic needs rate > 0 and centre in (0, 1)")
    s_poly = [Polynomial([0.0, 1.0])]
    ds = Polynomial([0.0, rate, -rate])  # ds/dt = rate s (1 - s)

    def poly(j):
        while len(s_poly) <= j:
            s_poly.append(s_poly[-1].deriv() * ds)
        return s_poly[j]

    def deriv(t, j):
        s = 1.0 / (1.0 + np.exp(-rate * (np.asarray(t, dtype=float) - center)))
        return poly(j)(s)

    def zeros(j):
        if j == 0:
            return np.empty(0)
        r = poly(j).roots()
        r = np.sort(r[np.abs(r.imag) < 1e-12].real)
        r = r[(r > 1e-15) & (r < 1.0 - 1e-15)]
        x = center + np.log(r / (1.0 - r)) / rate
        return x[(x > 0.0) & (x < 1.0)]

    return Truth(f"monotone-logistic{{{rate:g},{center:g}}}", deriv, zeros)


TRUTHS = ("sine", "cubic", "piecewise-poly", "monotone-logistic")
_TRUTH_RE = re.compile(r"^\s*([a-z-]+)\s*(?:\{([^}]*)\})?\s*$")


def make_truth(spec: str, *, freq: float = 1.0, ell: int = 1) -> Truth:
    """Truth from an identifier such as ``sine``, ``sine{2}``, ``piecewise-poly{0.3,0.7}``.

    ``freq`` is used by ``sine`` when no braces are given; ``ell`` fixes which
    derivative of ``piecewise-poly`` changes sign at the breaks.
    """
    m = _TRUTH_RE.match(spec)
    if not m or m.group(1) not in TRUTHS:
        raise ValueError(f"unknown truth {spec!r}; expected one of {', '.join(TRUTHS)}")
    name, arg = m.group(1), m.group(2)
    params = [float(v) for v in arg.split(",")] if arg and arg.strip() else []
    if name == "sine":
        return _sine(params[0] if params else freq)
    if name == "cubic":
        return _cubic()
    if name == "piecewise-poly":
        return _piecewise_poly(params or (0.3, 0.7), ell)
    rate, center = (params + [10.0, 0.5][len(params) :])[:2]
    return _logistic(rate, center)


# ------------------------------------------------------------------ sampling


@dataclass(frozen=True)
class ReplicateStream:
    """Counter-based random streams of one replicate."""

    seed: int
    n: int
    replicate: int

    def generator(self, purpose: str) -> np.random.Generator:
        if purpose not in _PURPOSES:
            raise ValueError(f"unknown stream purpose {purpose!r}")
        key = np.random.SeedSequence([int(self.seed), int(self.n), int(self.replicate), _PURPOSES[purpose]])
        return np.random.Generator(np.random.Philox(key))


def generate(truth: Truth, n: int, sigma: float, design: str, stream: ReplicateStream) -> SampleSet:
    """Samples ``y_i = f(t_i) + eps_i`` with ``eps_i`` iid ``N(0, sigma^2)``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    dist = sinusoidal() if design == "analytic-cdf" else uniform()
    rng = stream.generator("design") if design == "iid-uniform" else None
    t = design_points(n, design, dist, rng)
    y = truth(t)
    if sigma > 0:
        y = y + sigma * stream.generator("noise").standard_normal(n)
    return SampleSet(t, y, sigma if sigma > 0 else None, dist)


# -------------------------------------------------------------------- config


_RULE_RE = re.compile(r"^\s*([0-9.eE+-]+)\s*\*\s*N\s*\^\s*\(?\s*([0-9.eE+-]+)\s*\)?\s*$")


@dataclass(frozen=True)
class ParamRule:
    """Smoothing-parameter rule: ``auto``, a constant, or ``c*N^p``."""

    text: str = "auto"

    def __post_init__(self) -> None:
        if self.text != "auto":
            self.value(100)

    @property
    def is_auto(self) -> bool:
        return self.text == "auto"

    def value(self, n: int) -> float:
        if self.is_auto:
            raise ValueError("auto rule has no closed-form value")
        m = _RULE_RE.match(self.text)
        v = float(m.group(1)) * float(n) ** float(m.group(2)) if m else float(self.text)
        if not v > 0:
            raise ValueError(f"rule {self.text!r} must give a positive value")
        return v


ESTIMATORS = ("kernel", "spline", "pilot", "constrained-oracle")
DESIGNS = ("equispaced", "iid-uniform", "analytic-cdf")
_REQUIRED_KEYS = (
    "truth", "freq", "ell", "m", "sigma", "design", "N",
    "replicates", "seed", "estimator", "width_rule", "alpha",
)
_OPTIONAL_KEYS = ("h", "lambda")


@dataclass(frozen=True)
class ExperimentConfig:
    """Description of one Monte Carlo experiment.

    ``h`` (kernel bandwidth) and ``lam`` (spline smoothing) are rules:
    ``auto`` selects by GCV, otherwise a constant or ``c*N^p``.
    """

    truth: str = "sine"
    freq: float = 1.0
    ell: int = 1
    m: int = 2
    sigma: float = 0.3
    design: str = "equispaced"
    N: tuple[int, ...] = (500,)
    replicates: int = 10
    seed: int = 0
    estimator: str = "spline"
    width_rule: str = "sigma:3"
    alpha: float = 0.05
    h: ParamRule = ParamRule()
    lam: ParamRule = ParamRule()

    def __post_init__(self) -> None:
        make_truth(self.truth, freq=self.freq, ell=self.ell)
        if self.ell < 0 or self.m < 1:
            raise ValueError("need ell >= 0 and m >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {', '.join(DESIGNS)}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {', '.join(ESTIMATORS)}")
        if not self.N or any(n < 2 for n in self.N) or list(self.N) != sorted(set(self.N)):
            raise ValueError("N_list must be strictly ascending with N >= 2")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        WidthRule.parse(self.width_rule)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def truth_fn(self) -> Truth:
        return make_truth(self.truth, freq=self.freq, ell=self.ell)

    def canonical(self) -> str:
        """Sorted ``key=value`` text; the basis of the config hash."""
        items = {
            "truth": self.truth, "freq": repr(float(self.freq)), "ell": str(self.ell), "m": str(self.m),
            "sigma": repr(float(self.sigma)), "design": self.design, "N": ",".join(map(str, self.N)),
            "replicates": str(self.replicates), "seed": str(self.seed), "estimator": self.estimator,
            "width_rule": self.width_rule, "alpha": repr(float(self.alpha)),
            "h": self.h.text, "lambda": self.lam.text,
        }
        return "\n".join(f"{k}={items[k]}" for k in sorted(items))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` comments, optional quotes).

    All of ``truth, freq, ell, m, sigma, design, N, replicates, seed,
    estimator, width_rule, alpha`` are required; ``h`` and ``lambda`` are
    optional.  ``N`` is a comma list, optionally in brackets.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        value = value.strip("\"'")
        if key not in _REQUIRED_KEYS + _OPTIONAL_KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    missing = [k for k in _REQUIRED_KEYS if k not in raw]
    if missing:
        raise ValueError(f"missing config keys: {', '.join(missing)}")
    n_list = tuple(int(v) for v in raw["N"].strip("[]() ").split(",") if v.strip())
    return ExperimentConfig(
        truth=raw["truth"],
        freq=float(raw["freq"]),
        ell=int(raw["ell"]),
        m=int(raw["m"]),
        sigma=float(raw["sigma"]),
        design=raw["design"],
        N=n_list,
        replicates=int(raw["replicates"]),
        seed=int(raw["seed"]),
        estimator=raw["estimator"],
        width_rule=raw["width_rule"],
        alpha=float(raw["alpha"]),
        h=ParamRule(raw.get("h", "auto")),
        lam=ParamRule(raw.get("lambda", "auto")),
    )


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------- replicates


@dataclass
class ReplicateResult:
    """Outcome of one replicate; metrics are NaN/None when not applicable."""

    index: int
    ok: bool
    ise: np.ndarray
    k_hat: float = math.nan
    k_true: float = math.nan
    predicted_ek: float = math.nan
    misspecified: bool | None = None
    dominance: bool | None = None
    ise_ref: np.ndarray | None = None
    false_inside: int | None = None
    curve: np.ndarray | None = None
    error: str = ""


def _ise(est: np.ndarray, truth: np.ndarray, x: np.ndarray, lo: float, hi: float) -> float:
    mask = (x >= lo - 1e-12) & (x <= hi + 1e-12)
    return float(integrate.trapezoid((est[mask] - truth[mask]) ** 2, x[mask]))


def _ise_orders(cfg: ExperimentConfig) -> int:
    return cfg.ell + 2 if cfg.estimator == "kernel" else cfg.m


def _curve_grid() -> np.ndarray:
    return np.linspace(0.0, 1.0, _CURVE_POINTS)


def _curve(grid: np.ndarray, values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Estimate on the common curve grid, NaN outside ``[lo, hi]``."""
    x = _curve_grid()
    out = np.interp(x, grid, values)
    out[(x < lo - 1e-12) | (x > hi + 1e-12)] = np.nan
    return out


_WEIGHT_CACHE: dict[tuple, sparse.csr_matrix] = {}
_KERNEL_GRID_PER_H = 64.0


def _kernel_weights(samples: SampleSet, kernel, h: float, deriv: int, grid: np.ndarray) -> sparse.csr_matrix:
    """Sparse kernel weight matrices, cached for deterministic designs."""
    key = (samples.t.tobytes(), samples.dist.name, kernel.ell, h, deriv, grid.size)
    w = _WEIGHT_CACHE.get(key)
    if w is None:
        if len(_WEIGHT_CACHE) >= 8:
            _WEIGHT_CACHE.clear()
        w = sparse.csr_matrix(gm_weights(samples.t, kernel, h, deriv, grid, samples.dist))
        _WEIGHT_CACHE[key] = w
    return w


def _kernel_replicate(cfg, truth, samples, res: ReplicateResult) -> None:
    n, ell = samples.n, cfg.ell
    kernel = make_kernel(ell)
    h = kernel_gcv_bandwidth(samples, kernel)[0] if cfg.h.is_auto else cfg.h.value(n)
    # coarse grids miss close pairs of crossings and bias K_hat downwards
    size = max(1025, int(math.ceil(_KERNEL_GRID_PER_H * (1.0 - 2.0 * h) / h)) + 1)
    grid = estimation_grid(h, size)
    ests = [_kernel_weights(samples, kernel, h, j, grid) @ samples.y for j in range(ell + 2)]
    res.ise = np.array([_ise(ests[j], truth.deriv(grid, j), grid, h, 1.0 - h) for j in range(ell + 2)])
    fit = KernelFit(grid, ests[ell], ests[ell + 1], h, ell)
    res.k_hat = extract_change_points(fit).k_hat
    x, slopes = truth.change_points(ell, h, 1.0 - h)
    res.k_true = x.size
    res.predicted_ek = expected_false_changepoints(x, slopes, kernel, h, n, cfg.sigma, samples.dist) if x.size else 0.0
    res.curve = _curve(grid, ests[0], h, 1.0 - h)


def _spline_ise(cfg, truth, fit) -> np.ndarray:
    g = fit.grid
    return np.array(
        [_ise(fit.deriv[j], truth.deriv(g, j), g, SPLINE_DELTA, 1.0 - SPLINE_DELTA) for j in range(cfg.m)]
    )


def _zeroed(d: np.ndarray, scale: float | None = None) -> np.ndarray:
    # active constraints pin derivatives to zero up to roundoff; pass the
    # scale of the whole curve when ``d`` is a pinned piece of it
    if scale is None:
        scale = float(np.max(np.abs(d))) if d.size else 1.0
    return np.where(np.abs(d) <= 1e-9 * max(scale, 1e-300), 0.0, d)


def _false_inside(values: np.ndarray, grid: np.ndarray, specs: Sequence[ConstraintSpec], ell: int) -> int:
    """Spurious ell-th derivative sign changes inside the constrained intervals.

    Differences of order ``ell`` are taken at their stencil centres, the
    points where the discrete constraints act.  An interval constraining
    derivative ``ell + 1`` allows one sign change; one constraining
    derivative ``ell`` allows none.
    """
    dx = grid[1] - grid[0]
    d = np.diff(values, ell) / dx**ell
    centres = grid[: d.size] + 0.5 * ell * dx
    scale = float(np.max(np.abs(d))) if d.size else 1.0
    false = 0
    for spec in specs:
        if spec.deriv_order not in (ell, ell + 1):
            continue
        allowed = 1 if spec.deriv_order == ell + 1 else 0
        for iv in spec.intervals:
            sel = (centres >= iv.lo - 1e-12) & (centres <= iv.hi + 1e-12)
            false += max(0, sign_change_count(_zeroed(d[sel], scale)) - allowed)
    return false


def _spline_metrics(cfg, truth, fit, res: ReplicateResult) -> None:
    g = fit.grid
    res.ise = _spline_ise(cfg, truth, fit)
    mask = (g >= SPLINE_DELTA) & (g <= 1.0 - SPLINE_DELTA)
    if cfg.ell <= cfg.m:
        res.k_hat = sign_change_count(_zeroed(fit.deriv[cfg.ell][mask]))
    res.k_true = truth.change_points(cfg.ell, SPLINE_DELTA, 1.0 - SPLINE_DELTA)[0].size
    res.curve = _curve(g, fit.values, SPLINE_DELTA, 1.0 - SPLINE_DELTA)


def _spline_config(cfg, samples) -> SplineConfig:
    sconf = SplineConfig(m=cfg.m, sigma=samples.noise_sd())
    if cfg.lam.is_auto:
        return sconf.with_lam(gcv_select(samples, sconf).lambda_star)
    return sconf.with_lam(cfg.lam.value(samples.n))


def _in_cone(specs: Sequence[ConstraintSpec], values: np.ndarray, grid: np.ndarray, m: int) -> bool:
    """Whether grid values satisfy the discrete sign constraints."""
    if not specs:
        return True
    rows, _ = constraint_rows(specs, grid, m)
    cv = rows @ values
    return bool(np.all(cv >= -1e-12 * max(1.0, float(np.max(np.abs(cv))))))


def _dominates(samples, fit_c, fit_u, truth_vals) -> bool:
    conf = SplineConfig(m=fit_c.m, lam=fit_c.lam, grid_size=fit_c.grid.size, sigma=fit_c.sigma)
    vc = v_norm(truth_vals - fit_c.values, samples, conf)
    vu = v_norm(truth_vals - fit_u.values, samples, conf)
    return bool(vc <= vu + 1e-9)


def _oracle_replicate(cfg, truth, samples, res: ReplicateResult) -> None:
    sconf = _spline_config(cfg, samples)
    x, _ = truth.change_points(cfg.ell)
    edges = np.concatenate(([0.0], x, [1.0]))
    first_mid = 0.5 * (edges[0] + edges[1])
    first = 1 if truth.deriv(np.array([first_mid]), cfg.ell)[0] >= 0 else -1
    spec = cone_constraints(x, cfg.ell, first)
    fit_c, _ = fit_constrained(samples, sconf, spec, trace="none")
    fit_u = fit_spline(samples, sconf, trace="none")
    _spline_metrics(cfg, truth, fit_c, res)
    tv = truth(fit_c.grid)
    correct = _in_cone([spec], tv, fit_c.grid, cfg.m)
    res.misspecified = not correct
    res.dominance = _dominates(samples, fit_c, fit_u, tv) if correct else None
    res.ise_ref = _spline_ise(cfg, truth, fit_u)
    res.false_inside = _false_inside(fit_c.values, fit_c.grid, [spec], cfg.ell)


def _sign_changes_at(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    s = np.sign(values)
    idx = np.flatnonzero(s[:-1] * s[1:] < 0)
    a, b = values[idx], values[idx + 1]
    return grid[idx] + (grid[idx + 1] - grid[idx]) * a / (a - b)


def _pilot_replicate(cfg, truth, samples, res: ReplicateResult) -> None:
    pconf = PilotConfig(
        ell=cfg.ell,
        m=cfg.m,
        width_rule=WidthRule.parse(cfg.width_rule),
        alpha=cfg.alpha,
        second_stage_lambda=None if cfg.lam.is_auto else cfg.lam.value(samples.n),
        first_stage_h=None if cfg.h.is_auto else cfg.h.value(samples.n),
        trace="none",
    )
    out = pilot_fit(samples, pconf)
    _spline_metrics(cfg, truth, out.second_stage, res)
    ell, h = cfg.ell, out.diagnostics["h_used"]
    poly = Polynomial(out.centering_poly)
    # constraints act on the centred problem, so judge them against f - P
    xs = np.linspace(0.0, 1.0, _CP_GRID)
    centred_ell = truth.deriv(xs, ell) - (poly.deriv(ell)(xs) if ell else poly(xs))
    cps = _sign_changes_at(centred_ell, xs)
    in_region = cps[(cps >= h) & (cps <= 1.0 - h)]
    res.k_hat = out.report.k_hat
    res.k_true = in_region.size
    slopes = truth.deriv(in_region, ell + 1)
    if in_region.size and np.all(slopes != 0):
        res.predicted_ek = expected_false_changepoints(
            in_region, slopes, make_kernel(ell), h, samples.n, cfg.sigma, samples.dist
        )
    elif not in_region.size:
        res.predicted_ek = 0.0
    ok = out.k_odd == in_region.size
    for r in out.intervals:
        sel = (xs >= r.lo) & (xs <= r.hi)
        if r.parity == "odd":
            inside = np.count_nonzero((cps >= r.lo) & (cps <= r.hi))
            ok &= inside == 1 and bool(np.all(r.sign * truth.deriv(xs[sel], ell + 1) >= 0))
        else:
            ok &= bool(np.all(r.sign * centred_ell[sel] >= 0))
    res.misspecified = not ok
    res.ise_ref = _spline_ise(cfg, truth, out.unconstrained)
    if out.constrained and out.qp is not None:
        g = out.second_stage.grid
        res.false_inside = _false_inside(out.second_stage.values - poly(g), g, out.constraints, ell)
        tv = truth(g)
        centred = tv - poly(g)
        if _in_cone(out.constraints, centred, g, cfg.m):
            res.dominance = _dominates(samples, out.second_stage, out.unconstrained, tv)


def run_replicate(cfg: ExperimentConfig, n: int, index: int) -> ReplicateResult:
    """Generate, estimate and score one replicate; failures are recorded."""
    truth = cfg.truth_fn
    res = ReplicateResult(index, True, np.full(_ise_orders(cfg), np.nan))
    samples = generate(truth, n, cfg.sigma, cfg.design, ReplicateStream(cfg.seed, n, index))
    try:
        if cfg.estimator == "kernel":
            _kernel_replicate(cfg, truth, samples, res)
        elif cfg.estimator == "spline":
            fit = fit_spline(samples, _spline_config(cfg, samples), trace="none")
            _spline_metrics(cfg, truth, fit, res)
        elif cfg.estimator == "constrained-oracle":
            _oracle_replicate(cfg, truth, samples, res)
        else:
            _pilot_replicate(cfg, truth, samples, res)
    except (ValueError, ConditioningError, NonConvergenceError, np.linalg.LinAlgError) as exc:
        res.ok = False
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def _replicate_task(args: tuple) -> ReplicateResult:
    return run_replicate(*args)


# ------------------------------------------------------------------- reports


@dataclass
class NRecord:
    """Aggregates over the replicates at one sample size."""

    N: int
    estimator: str
    replicates: int
    failures: int
    mise: np.ndarray
    mise_se: np.ndarray
    mean_K_hat: float
    sd_K_hat: float
    K_true: float
    predicted_EK: float
    misspec_rate: float
    vnorm_dominance_rate: float
    dominance_applicable: int
    mise_ref: np.ndarray | None = None
    false_inside_rate: float = math.nan
    curve_t: np.ndarray | None = None
    curve_mean: np.ndarray | None = None
    curve_lo: np.ndarray | None = None
    curve_hi: np.ndarray | None = None


def _mean(values: list[float]) -> float:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    return float(np.mean(v)) if v.size else math.nan


def _aggregate(cfg: ExperimentConfig, n: int, results: list[ReplicateResult]) -> NRecord:
    results = sorted(results, key=lambda r: r.index)
    good = [r for r in results if r.ok]
    ise = np.array([r.ise for r in good]) if good else np.full((0, _ise_orders(cfg)), np.nan)
    count = ise.shape[0]
    mise = ise.mean(axis=0) if count else np.full(ise.shape[1], np.nan)
    se = ise.std(axis=0, ddof=1) / math.sqrt(count) if count > 1 else np.full(ise.shape[1], np.nan)
    k = np.array([r.k_hat for r in good], dtype=float)
    k = k[np.isfinite(k)]
    judged = [r.misspecified for r in good if r.misspecified is not None]
    dom = [r.dominance for r in good if r.dominance is not None]
    rec = NRecord(
        N=n,
        estimator=cfg.estimator,
        replicates=len(results),
        failures=len(results) - count,
        mise=mise,
        mise_se=se,
        mean_K_hat=float(k.mean()) if k.size else math.nan,
        sd_K_hat=float(k.std(ddof=1)) if k.size > 1 else math.nan,
        K_true=_mean([r.k_true for r in good]),
        predicted_EK=_mean([r.predicted_ek for r in good]),
        misspec_rate=float(np.mean(judged)) if judged else math.nan,
        vnorm_dominance_rate=float(np.mean(dom)) if dom else math.nan,
        dominance_applicable=len(dom),
    )
    refs = [r.ise_ref for r in good if r.ise_ref is not None]
    rec.mise_ref = np.mean(refs, axis=0) if refs else np.full(ise.shape[1], np.nan)
    fi = [r.false_inside > 0 for r in good if r.false_inside is not None]
    rec.false_inside_rate = float(np.mean(fi)) if fi else math.nan
    curves = [r.curve for r in good if r.curve is not None]
    if curves:
        c = np.array(curves)
        keep = np.all(np.isfinite(c), axis=0)
        if keep.any():
            c = c[:, keep]
            rec.curve_t = _curve_grid()[keep]
            rec.curve_mean = c.mean(axis=0)
            rec.curve_lo, rec.curve_hi = np.quantile(c, [0.025, 0.975], axis=0)
    return rec


def _fmt(x: float) -> str:
    return "nan" if x is None or not np.isfinite(x) else format(float(x), ".12g")


@dataclass
class SimulationReport:
    config: ExperimentConfig
    records: list[NRecord]

    def record(self, n: int) -> NRecord:
        for r in self.records:
            if r.N == n:
                return r
        raise KeyError(n)

    def columns(self) -> list[str]:
        j = len(self.records[0].mise) if self.records else 0
        cols = ["N", "estimator", "replicates", "failures"]
        for i in range(j):
            cols += [f"mise_{i}", f"mise_se_{i}"]
        return cols + [
            "mean_K_hat", "sd_K_hat", "K_true", "predicted_EK",
            "misspec_rate", "vnorm_dominance_rate", "dominance_applicable", "false_inside_rate",
        ] + [f"mise_ref_{i}" for i in range(j)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config_hash={self.config.config_hash()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for r in self.records:
            row = [str(r.N), r.estimator, str(r.replicates), str(r.failures)]
            for a, b in zip(r.mise, r.mise_se):
                row += [_fmt(a), _fmt(b)]
            row += [
                _fmt(r.mean_K_hat), _fmt(r.sd_K_hat), _fmt(r.K_true), _fmt(r.predicted_EK),
                _fmt(r.misspec_rate), _fmt(r.vnorm_dominance_rate), str(r.dominance_applicable),
                _fmt(r.false_inside_rate),
            ] + [_fmt(v) for v in r.mise_ref]
            w.writerow(row)
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "t", "fhat_mean", "fhat_lo", "fhat_hi"])
        for r in self.records:
            if r.curve_t is None:
                continue
            for row in zip(r.curve_t, r.curve_mean, r.curve_lo, r.curve_hi):
                w.writerow([str(r.N)] + [_fmt(v) for v in row])
        return buf.getvalue()

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    def write_curves(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.curves_csv())


def run_experiment(
    config: ExperimentConfig,
    *,
    workers: int = 1,
    order: Sequence[int] | None = None,
) -> SimulationReport:
    """Run every replicate at every ``N`` and aggregate.

    ``order`` permutes the execution order of replicate indices (the
    aggregates do not depend on it); ``workers > 1`` uses a process pool.
    """
    idx = list(range(config.replicates)) if order is None else [int(i) for i in order]
    if sorted(idx) != list(range(config.replicates)):
        raise ValueError("order must be a permutation of the replicate indices")
    records = []
    for n in config.N:
        tasks = [(config, n, i) for i in idx]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_replicate_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
        else:
            results = [_replicate_task(t) for t in tasks]
        records.append(_aggregate(config, n, results))
    return SimulationReport(config, records)


@dataclass(frozen=True)
class RateFit:
    slope: float
    stderr: float
    intercept: float


def mise_rate(report: SimulationReport | Sequence[tuple[int, float]], j: int = 0) -> RateFit:
    """OLS slope of ``log(mise_j)`` on ``log(N)``; needs at least 4 distinct ``N``."""
    if isinstance(report, SimulationReport):
        pairs = [(r.N, r.mise[j]) for r in report.records]
    else:
        pairs = [(int(n), float(v)) for n, v in report]
    pairs = [(n, v) for n, v in pairs if np.isfinite(v) and v > 0]
    if len({n for n, _ in pairs}) < 4:
        raise ValueError("need mise values at 4 or more distinct N")
    x = np.log([n for n, _ in pairs])
    y = np.log([v for _, v in pairs])
    fit = stats.linregress(x, y)
    return RateFit(float(fit.slope), float(fit.stderr), float(fit.intercept))
