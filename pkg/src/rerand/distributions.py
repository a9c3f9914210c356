"""Chi-square reference distributions and threshold calibration.

Balance scores are asymptotically independent chi-square variables, so
acceptance thresholds are calibrated against ``sum_m pi_m chi2_{k_m}``.
Single-component quantiles are computed in closed form; mixtures by seeded
Monte Carlo whose draws are index-addressed and therefore shard-invariant.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import rng
from .errors import AcceptanceTooRare, InvalidData, InvalidDof, InvalidProbability, InvalidThreshold

_EPS = 1e-16
_TINY = 1e-300
CHUNK = 1 << 20


def _check_dof(k) -> int:
    if int(k) != k or k <= 0:
        raise InvalidDof(f"degrees of freedom must be a positive integer, got {k!r}")
    return int(k)


def _gamma_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_fraction(a: float, x: float) -> float:
    # modified Lentz evaluation of the upper incomplete gamma continued fraction
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_p(a: float, x: float) -> float:
    """Lower regularized incomplete gamma ``P(a, x)``."""
    if x <= 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return min(1.0, _gamma_series(a, x))
    return max(0.0, 1.0 - _gamma_cont_fraction(a, x))


def chi2_cdf(k: int, x: float) -> float:
    """``Pr(chi2_k <= x)``."""
    k = _check_dof(k)
    if x < 0 or math.isnan(x):
        raise InvalidThreshold(f"chi-square argument must be >= 0, got {x!r}")
    return regularized_gamma_p(k / 2.0, x / 2.0)


def chi2_quantile(k: int, p: float) -> float:
    """Inverse of :func:`chi2_cdf` by bracketing, Newton steps and bisection."""
    k = _check_dof(k)
    if not 0.0 < p < 1.0:
        raise InvalidProbability(f"p must lie in (0, 1), got {p!r}")
    if k == 2:
        return -2.0 * math.log1p(-p)
    lo, hi = 0.0, max(1.0, float(k))
    while chi2_cdf(k, hi) < p:
        lo, hi = hi, hi * 2.0
    x = 0.5 * (lo + hi)
    half = k / 2.0
    log_norm = half * math.log(2.0) + math.lgamma(half)
    for _ in range(500):
        f = chi2_cdf(k, x) - p
        if f == 0.0:
            return x
        if f < 0:
            lo = x
        else:
            hi = x
        dens = math.exp((half - 1.0) * math.log(x) - x / 2.0 - log_norm) if x > 0 else 0.0
        step = x - f / dens if dens > 0 else lo - 1.0
        x = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return x


def v_factor(k: int, alpha: float) -> float:
    """Truncated-mean ratio ``Pr(chi2_{k+2} <= a) / Pr(chi2_k <= a)``.

    Equals ``E[chi2_k | chi2_k <= a] / k``: the fraction of variance left in
    a covariate direction after Mahalanobis rerandomization at threshold a.
    """
    k = _check_dof(k)
    if not alpha > 0:
        raise InvalidThreshold(f"threshold must be positive, got {alpha!r}")
    if math.isinf(alpha):
        return 1.0
    num = chi2_cdf(k + 2, alpha)
    den = chi2_cdf(k, alpha)
    if den == 0.0:
        # both underflow; use the small-alpha limit of the ratio
        return alpha / (k + 2.0)
    return num / den


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChiSquareMixture:
    """``sum_m weights[m] * chi2_{dofs[m]}`` with independent components."""

    weights: tuple[float, ...]
    dofs: tuple[int, ...]

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        d = tuple(_check_dof(v) for v in self.dofs)
        if len(w) != len(d) or not w:
            raise InvalidData("one weight per degree-of-freedom entry required")
        if min(w) < 0 or max(w) <= 0 or not all(math.isfinite(v) for v in w):
            raise InvalidData("weights must be finite, non-negative and not all zero")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "dofs", d)

    @classmethod
    def independent(cls, dofs: Sequence[int]) -> "ChiSquareMixture":
        return cls(tuple(1.0 for _ in dofs), tuple(dofs))

    @property
    def m(self) -> int:
        return len(self.dofs)

    def component_draws(self, seed: int, start: int, stop: int, stream: int = rng.MIXTURE) -> np.ndarray:
        """Independent chi-square components for draw indices ``start..stop-1``.

        Returns an ``(stop - start, M)`` matrix; row ``i`` depends only on
        ``(seed, stream, i)``.
        """
        slots = [rng.chi2_slots(k) for k in self.dofs]
        u = rng.uniforms(seed, stream, np.arange(start, stop), sum(slots))
        out = np.empty((stop - start, self.m))
        col = 0
        for m, (k, s) in enumerate(zip(self.dofs, slots)):
            out[:, m] = rng.chi2_from_uniforms(u[:, col:col + s], k)
            col += s
        return out

    def draws(self, seed: int, start: int, stop: int, stream: int = rng.MIXTURE) -> np.ndarray:
        return self.component_draws(seed, start, stop, stream) @ np.asarray(self.weights)


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    target_p: float
    achieved_p: float
    method: str
    mc_draws: int = 0
    mc_seed: int | None = None
    achieved_se: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MCEstimate:
    """A Monte Carlo answer with its standard error and provenance."""

    value: float
    se: float
    draws: int
    seed: int | None
    accepted: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _chunks(total: int):
    for start in range(0, total, CHUNK):
        yield start, min(total, start + CHUNK)


def _acceptance(mixture: ChiSquareMixture, alpha: float, draws: int, seed: int, stream: int) -> tuple[float, float]:
    hits = 0
    for a, b in _chunks(draws):
        hits += int(np.count_nonzero(mixture.draws(seed, a, b, stream) <= alpha))
    p = hits / draws
    return p, math.sqrt(p * (1 - p) / draws)


def mixture_quantile(mixture: ChiSquareMixture, p: float, mc_draws: int = 1_000_000, seed: int = 0) -> CalibrationResult:
    """Threshold ``alpha`` with ``Pr(sum pi chi2 <= alpha) = p``.

    A single component, or equal active weights (whose sum is again
    chi-square), is inverted exactly.  Otherwise ``alpha`` is the
    ``ceil(p * mc_draws)``-th smallest simulated mixture value, and the
    achieved probability is re-estimated on an independent substream.
    """
    if not 0.0 < p < 1.0:
        raise InvalidProbability(f"p must lie in (0, 1), got {p!r}")
    active = [(w, k) for w, k in zip(mixture.weights, mixture.dofs) if w > 0]
    if len({w for w, _ in active}) == 1:
        w = active[0][0]
        return CalibrationResult(w * chi2_quantile(sum(k for _, k in active), p), p, p, "closed_form")
    if mc_draws < 100_000:
        raise InvalidData("mixture calibration needs at least 1e5 draws")
    values = np.empty(mc_draws)
    for a, b in _chunks(mc_draws):
        values[a:b] = mixture.draws(seed, a, b)
    rank = max(1, math.ceil(p * mc_draws)) - 1
    alpha = float(np.partition(values, rank)[rank])
    achieved, se = _acceptance(mixture, alpha, mc_draws, seed, rng.MIXTURE_CHECK)
    return CalibrationResult(alpha, p, achieved, "monte_carlo", mc_draws, seed, se)


def truncated_mixture_component_mean(
    mixture: ChiSquareMixture,
    alpha: float,
    component: int,
    mc_draws: int = 1_000_000,
    seed: int = 0,
) -> MCEstimate:
    """``E[chi2_{k_t} | sum_m pi_m chi2_{k_m} <= alpha]`` by conditional Monte Carlo."""
    if not 0 <= component < mixture.m:
        raise InvalidData(f"component index {component} out of range")
    k = mixture.dofs[component]
    if math.isinf(alpha) or mixture.weights[component] == 0:
        # an unweighted component is independent of the truncation
        return MCEstimate(float(k), 0.0, 0, None)
    if not alpha > 0:
        raise InvalidThreshold("threshold must be positive")
    active = [m for m, w in enumerate(mixture.weights) if w > 0]
    if component in active and len({mixture.weights[m] for m in active}) == 1:
        # equal weights: given the chi-square total S, component t has mean S k_t / K
        total = sum(mixture.dofs[m] for m in active)
        val = k * v_factor(total, alpha / mixture.weights[component])
        return MCEstimate(val, 0.0, 0, None)
    s0 = s1 = s2 = 0.0
    w = np.asarray(mixture.weights)
    for a, b in _chunks(mc_draws):
        comp = mixture.component_draws(seed, a, b)
        keep = comp @ w <= alpha
        h = comp[keep, component]
        s0 += h.size
        s1 += float(h.sum())
        s2 += float(h @ h)
    if s0 == 0:
        raise AcceptanceTooRare("no simulated draw fell in the acceptance region", observed_rate=0.0)
    mean = s1 / s0
    var = max(0.0, s2 / s0 - mean * mean)
    se = math.sqrt(var / s0) if s0 > 1 else float("inf")
    return MCEstimate(mean, se, mc_draws, seed, int(s0))
