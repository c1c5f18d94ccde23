"""Secure state estimation for linear-Gaussian systems under sensor attacks.

A library implementing joint state-sequence estimation and per-observation
anomaly detection over a fixed window, with a closed-form filter/smoother
path, a warm-startable proximal-gradient path, comparison detectors, and a
reproducible experiment harness behind the ``gbse`` command-line tool.
"""

from .baselines import (
    DetectorVerdict,
    Metrics,
    chi2_detector,
    cusum_detector,
    evaluate,
    resilient_estimator,
)
from .direct import (
    FilterPass,
    SmootherPass,
    StackedEstimate,
    StackedGain,
    build_stacked_gain,
    estimate_direct,
    filter_partial,
    recompute_after_insert,
    smooth,
)
from .gbs import (
    GbsConfig,
    GbsConvergenceError,
    GbsResult,
    brute_force_mip,
    gbs_estimate,
    initial_strategy,
    refine_indicator,
    update_indicators,
    weighted_residuals,
)
from .iterative import (
    ConvergenceParams,
    IterateTrace,
    StackedSystem,
    build_stacked,
    convergence_params,
    estimate_iterative,
    grad_f,
    iteration_bound,
    prox_step,
    rank_one_update,
)
from .model import (
    AttackSpec,
    IllConditionedModelError,
    IndexSet,
    IndicatorSequence,
    ObservationWindow,
    StateTrajectory,
    SystemModel,
    apply_attack,
    derive_seed,
    objective_l,
    objective_w,
    simulate,
)

__all__ = [
    "AttackSpec",
    "ConvergenceParams",
    "DetectorVerdict",
    "FilterPass",
    "GbsConfig",
    "GbsConvergenceError",
    "GbsResult",
    "IllConditionedModelError",
    "IndexSet",
    "IndicatorSequence",
    "IterateTrace",
    "Metrics",
    "ObservationWindow",
    "SmootherPass",
    "StackedEstimate",
    "StackedGain",
    "StackedSystem",
    "StateTrajectory",
    "SystemModel",
    "apply_attack",
    "brute_force_mip",
    "build_stacked",
    "build_stacked_gain",
    "chi2_detector",
    "convergence_params",
    "cusum_detector",
    "derive_seed",
    "estimate_direct",
    "estimate_iterative",
    "evaluate",
    "filter_partial",
    "gbs_estimate",
    "grad_f",
    "initial_strategy",
    "iteration_bound",
    "objective_l",
    "objective_w",
    "prox_step",
    "rank_one_update",
    "recompute_after_insert",
    "refine_indicator",
    "resilient_estimator",
    "simulate",
    "smooth",
    "update_indicators",
    "weighted_residuals",
]

__version__ = "0.1.0"
