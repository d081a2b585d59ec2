"""Particle solver for fully coupled mean-field backward-forward SDEs
and open-loop Nash equilibria of linear-quadratic mean-field games."""

from .backward import RegressionBasis, solve_backward
from .fixpoint import Diverged, MfSolution, SchemeParams, residual, solve
from .forward import propagate
from .lqgame import (
    GameSpec,
    NashResult,
    Nonexistence,
    build_aggregated,
    check_H2,
    deviation_test,
    example3_game,
    solve_mean_fbode,
    solve_nash,
)
from .measure import EmpiricalMeasure, mean, w2_exact, w2_paired_bound
from .paths import BrownianBundle, PathEnsemble, TimeGrid, make_bundle, marginal
from .problem import (
    LipschitzProfile,
    MfProblem,
    MonotonicityProfile,
    check_H1,
    check_smallness,
    contraction_constants,
    eval_A,
)

__version__ = "0.1.0"

__all__ = [
    "BrownianBundle",
    "Diverged",
    "EmpiricalMeasure",
    "GameSpec",
    "LipschitzProfile",
    "MfProblem",
    "MfSolution",
    "MonotonicityProfile",
    "NashResult",
    "Nonexistence",
    "PathEnsemble",
    "RegressionBasis",
    "SchemeParams",
    "TimeGrid",
    "build_aggregated",
    "check_H1",
    "check_H2",
    "check_smallness",
    "contraction_constants",
    "deviation_test",
    "eval_A",
    "example3_game",
    "make_bundle",
    "marginal",
    "mean",
    "propagate",
    "residual",
    "solve",
    "solve_backward",
    "solve_mean_fbode",
    "solve_nash",
    "w2_exact",
    "w2_paired_bound",
]
