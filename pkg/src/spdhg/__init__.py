"""Stochastic primal-dual hybrid gradient with arbitrary block sampling.

Solves ``min_x sum_i f_i(A_i x) + g(x)`` through its saddle-point form, updating
a random subset of dual blocks per iteration.  Variants for strongly convex
``g`` (primal acceleration), strongly convex ``f_i*`` (dual acceleration) and
both (linear rate, with closed-form step plans) share one engine.
"""
from .blockspace import BlockVector, Shape, StructureError
from .diagnostics import SaddleReference, bregman_gap, fit_rate, metric_distances
from .operators import BlockOperator, LinearOp, conv2d, grad2d, op_norm, toy_radon
from .planner import ConditionProfile, plan_importance, plan_optimal, plan_uniform, verify_plan
from .sampling import full_sampling, serial_sampling, uniform_serial, validate_eso
from .solvers import SaddleProblem, StepPlan, pdhg, run

__all__ = [
    "BlockVector",
    "Shape",
    "StructureError",
    "SaddleReference",
    "bregman_gap",
    "fit_rate",
    "metric_distances",
    "BlockOperator",
    "LinearOp",
    "conv2d",
    "grad2d",
    "op_norm",
    "toy_radon",
    "ConditionProfile",
    "plan_importance",
    "plan_optimal",
    "plan_uniform",
    "verify_plan",
    "full_sampling",
    "serial_sampling",
    "uniform_serial",
    "validate_eso",
    "SaddleProblem",
    "StepPlan",
    "pdhg",
    "run",
]

__version__ = "0.1.0"
