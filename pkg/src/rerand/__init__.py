"""Rerandomization: balance criteria, randomization engines and admissibility analysis."""

from .criteria import (
    Assignment,
    Intersection,
    MahalanobisThreshold,
    PerCovariateBounds,
    ScoreVector,
    Stochastic,
    Stratification,
    StratumScoreThreshold,
    TierScoreThreshold,
    WeightedSumThreshold,
    evaluate,
)
from .engine import BalanceReport, RandomizationPlan, enumerate_assignments, monte_carlo_balance, rerandomize
from .errors import RerandError
from .stats import Population, load_population

__all__ = [
    "Assignment",
    "BalanceReport",
    "Intersection",
    "MahalanobisThreshold",
    "PerCovariateBounds",
    "Population",
    "RandomizationPlan",
    "RerandError",
    "ScoreVector",
    "Stochastic",
    "Stratification",
    "StratumScoreThreshold",
    "TierScoreThreshold",
    "WeightedSumThreshold",
    "enumerate_assignments",
    "evaluate",
    "load_population",
    "monte_carlo_balance",
    "rerandomize",
]
