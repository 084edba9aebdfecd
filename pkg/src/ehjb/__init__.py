"""Solver and verification toolkit for ergodic HJB equations and ergodic BSDEs."""

__version__ = "0.1.0"

from .model import (
    Box,
    ConditionReport,
    ConvexSet,
    DriverSplit,
    GridFunction,
    PathEnsemble,
    ProblemSpec,
    RunningCost,
    SolveReport,
    VectorField,
    eval_driver,
    finite_diff_gradient,
)
from .solver import SolverOptions, TruncatedDriver, truncate_driver, vanishing_discount

__all__ = [
    "Box",
    "ConditionReport",
    "ConvexSet",
    "DriverSplit",
    "GridFunction",
    "PathEnsemble",
    "ProblemSpec",
    "RunningCost",
    "SolveReport",
    "SolverOptions",
    "TruncatedDriver",
    "VectorField",
    "eval_driver",
    "finite_diff_gradient",
    "truncate_driver",
    "vanishing_discount",
    "__version__",
]
