"""Command line interface: ``pwconvex <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from typing import Sequence, TextIO

import numpy as np

from .changepoints import extract_change_points
from .constrained import ConstraintSpec, fit_constrained
from .design import SampleSet, sinusoidal, star_discrepancy, uniform
from .errors import ConditioningError, NonConvergenceError
from .kernels import estimation_grid, gm_estimate, kernel_fit, make_kernel
from .pilot import PilotConfig, WidthRule, _first_stage_grid, pilot_fit
from .selection import candidate_fits, select_model
from .simharness import load_config, run_experiment
from .spline import SplineConfig, SplineFit, fit_spline, gcv_select

__all__ = ["main", "build_parser"]


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else format(float(x), ".12g")


def _read_columns(path: str, names: Sequence[str]) -> list[np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        header = [f.strip() for f in reader.fieldnames]
        missing = [n for n in names if n not in header]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        cols: dict[str, list[float]] = {n: [] for n in names}
        for row in reader:
            row = {k.strip(): v for k, v in row.items() if k is not None}
            for n in names:
                cols[n].append(float(row[n]))
    return [np.asarray(cols[n], dtype=float) for n in names]


def _read_samples(path: str, sigma: float | None = None) -> SampleSet:
    t, y = _read_columns(path, ("t", "y"))
    order = np.argsort(t, kind="stable")
    return SampleSet(t[order], y[order], sigma)


def _dist(text: str):
    if text == "uniform":
        return uniform()
    if text.startswith("sinusoidal"):
        _, _, a = text.partition(":")
        return sinusoidal(float(a) if a else 0.5)
    raise ValueError(f"unknown distribution {text!r} (uniform or sinusoidal[:a])")


def _write_rows(out: TextIO, header: Sequence[str], rows) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([c if isinstance(c, str) else _fmt(c) for c in r])


def _open_out(path: str | None):
    return open(path, "w", newline="", encoding="utf-8") if path else _Stdout()


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        return False


def _write_fit(path: str | None, fit: SplineFit) -> None:
    orders = sorted(j for j in fit.deriv if j > 0)
    header = ["t", "fhat"] + [f"d{j}" for j in orders]
    rows = zip(fit.grid, fit.values, *(fit.deriv[j] for j in orders))
    with _open_out(path) as out:
        _write_rows(out, header, rows)


# ---------------------------------------------------------------- commands


def cmd_discrepancy(a) -> int:
    (t,) = _read_columns(a.input, ("t",))
    rep = star_discrepancy(np.sort(t), _dist(a.dist))
    _write_rows(sys.stdout, ["d_star", "max_spacing", "min_spacing"], [(rep.d_star, rep.max_spacing, rep.min_spacing)])
    return 0


def cmd_ksmooth(a) -> int:
    s = _read_samples(a.input)
    kernel = make_kernel(a.ell)
    grid = estimation_grid(a.h, a.grid)
    est = gm_estimate(s, kernel, a.h, a.deriv, grid)
    with _open_out(a.output) as out:
        _write_rows(out, ["t", "estimate"], zip(grid, est))
    return 0


def cmd_changepoints(a) -> int:
    s = _read_samples(a.input, a.sigma)
    kernel = make_kernel(a.ell)
    fit = kernel_fit(s, kernel, a.h, _first_stage_grid(a.h))
    rep = extract_change_points(fit, sigma=s.noise_sd(), n=s.n, kernel=kernel, alpha=a.alpha)
    rows = []
    for p in rep.points:
        lo, hi = p.uncertainty if p.uncertainty is not None else (math.nan, math.nan)
        rows.append((p.x_hat, str(p.sign_flip), p.sigma_if_hat, lo, hi, str(p.cluster_id), rep.clusters[p.cluster_id].parity))
    with _open_out(a.output) as out:
        _write_rows(out, ["x_hat", "sign", "sigma_if", "lo", "hi", "cluster", "parity"], rows)
    return 0


def _spline_config(a, s: SampleSet) -> SplineConfig:
    return SplineConfig(m=a.m, grid_size=a.grid, sigma=s.noise_sd())


def cmd_fit(a) -> int:
    s = _read_samples(a.input, a.sigma)
    conf = _spline_config(a, s)
    if a.lam == "auto":
        g = gcv_select(s, conf)
        fit = g.fit
        score = float(np.min(g.score_curve))
        _write_rows(sys.stdout if a.output else sys.stderr, ["lambda_star", "p_eff", "gcv_score"], [(g.lambda_star, fit.p_eff, score)])
    else:
        fit = fit_spline(s, conf.with_lam(float(a.lam)))
    _write_fit(a.output, fit)
    return 0


def cmd_cfit(a) -> int:
    s = _read_samples(a.input, a.sigma)
    deriv, lo, hi, sign = _read_columns(a.constraints, ("deriv", "lo", "hi", "sign"))
    specs = ConstraintSpec.from_rows(zip(deriv.astype(int), lo, hi, sign.astype(int)))
    conf = _spline_config(a, s)
    lam = gcv_select(s, conf).lambda_star if a.lam == "auto" else float(a.lam)
    fit, qp = fit_constrained(s, conf.with_lam(lam), specs)
    summary = sys.stdout if a.output else sys.stderr
    _write_rows(summary, ["lambda", "p_eff", "n_active", "kkt_residual", "iterations"],
                [(lam, fit.p_eff, str(qp.n_active), qp.kkt_residual, str(qp.iterations))])
    _write_fit(a.output, fit)
    return 0


def cmd_pilot(a) -> int:
    s = _read_samples(a.input, a.sigma)
    cfg = PilotConfig(
        ell=a.ell,
        m=a.m,
        width_rule=WidthRule.parse(a.width_rule),
        alpha=a.alpha,
        first_stage_h=a.h,
    )
    res = pilot_fit(s, cfg)
    _write_fit(a.output, res.second_stage)
    if a.diag:
        rows = [(r.x_hat, r.sigma_if, r.lo, r.hi, str(r.sign), r.parity) for r in res.intervals]
        with open(a.diag, "w", newline="", encoding="utf-8") as fh:
            _write_rows(fh, ["x_hat", "sigma_if", "lo", "hi", "sign", "parity"], rows)
    d = res.diagnostics
    print(
        f"h={_fmt(d['h_used'])} k_hat={d['k_hat']} intervals={len(res.intervals)} "
        f"lambda={_fmt(d['lambda_used'])} constrained={d['constrained']}",
        file=sys.stdout if a.output else sys.stderr,
    )
    return 0


def cmd_select(a) -> int:
    s = _read_samples(a.input, a.sigma)
    cands = candidate_fits(s, a.ell, a.kmax, m=a.m)
    res = select_model(s, cands, gamma1=a.gamma1, gamma2=a.gamma2)
    rows = [(str(r["K"]), r["p"], r["sigma_hat2"], r["pcic"]) for r in res.table]
    _write_rows(sys.stdout, ["K", "p", "sigma_hat2", "pcic"], rows)
    best = res.best
    locs = " ".join(f"{x:.6g}" for x in best.locations)
    print(f"winner K={best.K} locations=[{locs}]")
    return 0


def cmd_simulate(a) -> int:
    cfg = load_config(a.config)
    rep = run_experiment(cfg, workers=a.workers)
    rep.write(a.out)
    if a.emit_curves:
        rep.write_curves(a.emit_curves)
    return 0


# ------------------------------------------------------------------ parser


def _lam(text: str) -> str:
    if text != "auto":
        v = float(text)
        if not v > 0:
            raise argparse.ArgumentTypeError("lambda must be positive or 'auto'")
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwconvex", description="Piecewise convex regression tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_cmd(name: str, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--input", required=True, help="CSV with columns t,y")
        sp.add_argument("--sigma", type=float, default=None, help="known noise sd (default: estimated)")
        return sp

    sp = sub.add_parser("discrepancy", help="star discrepancy and spacings of a design")
    sp.add_argument("--input", required=True, help="CSV with column t")
    sp.add_argument("--dist", default="uniform", help="uniform or sinusoidal[:a]")
    sp.set_defaults(func=cmd_discrepancy)

    sp = data_cmd("ksmooth", "kernel derivative estimate")
    sp.add_argument("--ell", type=int, required=True)
    sp.add_argument("--deriv", type=int, required=True)
    sp.add_argument("--h", type=float, required=True)
    sp.add_argument("--grid", type=int, default=512)
    sp.add_argument("--output", default=None)
    sp.set_defaults(func=cmd_ksmooth)

    sp = data_cmd("changepoints", "sign changes of a kernel estimate")
    sp.add_argument("--ell", type=int, required=True)
    sp.add_argument("--h", type=float, required=True)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--output", default=None)
    sp.set_defaults(func=cmd_changepoints)

    sp = data_cmd("fit", "unconstrained smoothing spline")
    sp.add_argument("--m", type=int, default=2)
    sp.add_argument("--lambda", dest="lam", type=_lam, default="auto")
    sp.add_argument("--grid", type=int, default=None)
    sp.add_argument("--output", default=None)
    sp.set_defaults(func=cmd_fit)

    sp = data_cmd("cfit", "sign-constrained smoothing spline")
    sp.add_argument("--m", type=int, default=2)
    sp.add_argument("--lambda", dest="lam", type=_lam, default="auto")
    sp.add_argument("--constraints", required=True, help="CSV with columns deriv,lo,hi,sign")
    sp.add_argument("--grid", type=int, default=None)
    sp.add_argument("--output", default=None)
    sp.set_defaults(func=cmd_cfit)

    sp = data_cmd("pilot", "two-stage piecewise convex estimate")
    sp.add_argument("--ell", type=int, default=1)
    sp.add_argument("--m", type=int, default=None)
    sp.add_argument("--width-rule", default="sigma:3")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--h", type=float, default=None, help="first-stage bandwidth (default: inflated GCV)")
    sp.add_argument("--output", default=None)
    sp.add_argument("--diag", default=None)
    sp.set_defaults(func=cmd_pilot)

    sp = data_cmd("select", "choose the number of change points by PCIC")
    sp.add_argument("--ell", type=int, default=1)
    sp.add_argument("--kmax", type=int, default=4)
    sp.add_argument("--m", type=int, default=None)
    sp.add_argument("--gamma1", type=float, default=1.0)
    sp.add_argument("--gamma2", type=float, default=2.0)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    sp.add_argument("--config", required=True, help="key = value experiment file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--emit-curves", default=None)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, ConditioningError, NonConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
