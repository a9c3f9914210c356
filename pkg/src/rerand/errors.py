"""Exception hierarchy.

Every error carries a short machine-readable ``kind`` and an ``exit_code``
used by the command-line front end (1 = domain error, 2 = usage / IO).
"""

from __future__ import annotations


class RerandError(Exception):
    kind = "error"
    exit_code = 1

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "message": str(self)}
        if self.details:
            out["details"] = self.details
        return out


class InvalidData(RerandError):
    kind = "invalid_data"


class SingularCovariance(RerandError):
    kind = "singular_covariance"


class NotPositiveDefinite(RerandError):
    kind = "not_positive_definite"


class CollinearTiers(RerandError):
    kind = "collinear_tiers"


class ZeroVariance(RerandError):
    kind = "zero_variance"


class InsufficientStratum(RerandError):
    kind = "insufficient_stratum"


class InvalidCriterion(RerandError):
    kind = "invalid_criterion"


class InvalidPlan(RerandError):
    kind = "invalid_plan"


class InvalidDof(RerandError):
    kind = "invalid_dof"


class InvalidProbability(RerandError):
    kind = "invalid_probability"


class InvalidThreshold(RerandError):
    kind = "invalid_threshold"


class AcceptanceTooRare(RerandError):
    """Raised when no (or too little) acceptance weight was observed.

    ``observed_rate`` is attached so callers can recalibrate thresholds.
    """

    kind = "acceptance_too_rare"

    def __init__(self, message: str = "", observed_rate: float = 0.0, **details):
        super().__init__(message, observed_rate=observed_rate, **details)
        self.observed_rate = observed_rate


class TooLarge(RerandError):
    kind = "too_large"


class DegenerateWeights(RerandError):
    kind = "degenerate_weights"


class EmptySelection(RerandError):
    kind = "empty_selection"


class UsageError(RerandError):
    kind = "usage"
    exit_code = 2


class IOFailure(RerandError):
    kind = "io"
    exit_code = 2
