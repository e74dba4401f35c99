"""Piecewise convex regression: change-point detection and sign-constrained splines.

Modules
-------
design
    Measurement designs, star discrepancy and discrete integration bounds.
kernels
    Polynomial kernels and Gasser-Mueller derivative estimates.
changepoints
    Sign changes of kernel estimates, their spread and false-detection rates.
spline
    Discretised smoothing splines, hat-matrix traces and GCV.
constrained
    Sign constraints on derivatives and the active-set QP.
pilot
    Two-stage estimator: oversmoothed detection, then a constrained spline.
selection
    Information criteria and the search over the number of change points.
simharness
    Seeded Monte Carlo experiments and CSV reports.
"""

from __future__ import annotations

from .changepoints import ChangePointReport, expected_false_changepoints, extract_change_points, h_function
from .constrained import ConstraintSpec, QpSolution, SignInterval, active_set_qp, fit_constrained
from .design import SampleSet, design_points, star_discrepancy
from .errors import ConditioningError, CyclingError, NonConvergenceError
from .kernels import KernelSpec, gm_estimate, kernel_fit, make_kernel
from .pilot import PilotConfig, PilotResult, pilot_fit
from .selection import criterion_pcic, select_model
from .simharness import ExperimentConfig, SimulationReport, mise_rate, run_experiment
from .spline import SplineConfig, SplineFit, fit_spline, gcv_select, v_norm

__version__ = "0.1.0"

__all__ = [
    "ChangePointReport",
    "ConditioningError",
    "ConstraintSpec",
    "CyclingError",
    "ExperimentConfig",
    "KernelSpec",
    "NonConvergenceError",
    "PilotConfig",
    "PilotResult",
    "QpSolution",
    "SampleSet",
    "SignInterval",
    "SimulationReport",
    "SplineConfig",
    "SplineFit",
    "active_set_qp",
    "criterion_pcic",
    "design_points",
    "expected_false_changepoints",
    "extract_change_points",
    "fit_constrained",
    "fit_spline",
    "gcv_select",
    "gm_estimate",
    "h_function",
    "kernel_fit",
    "make_kernel",
    "mise_rate",
    "pilot_fit",
    "run_experiment",
    "select_model",
    "star_discrepancy",
    "v_norm",
]
