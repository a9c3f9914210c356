"""Admissibility tools: dominance tests, unified-rule construction,
inquiry cost, candidate selection, asymptotic variances and weights.

Comparisons run on a *score source*: either a :class:`ChiSquareMixture`
(independent chi-square components, the large-sample score law) or an
explicit ``(N, M)`` matrix of score draws.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np

from . import rng
from .criteria import (
    Criterion,
    MahalanobisThreshold,
    WeightedSumThreshold,
    evaluate_scores,
    to_json,
)
from .distributions import (
    CHUNK,
    CalibrationResult,
    ChiSquareMixture,
    chi2_quantile,
    mixture_quantile,
    truncated_mixture_component_mean,
    v_factor,
)
from .errors import (
    AcceptanceTooRare,
    DegenerateWeights,
    EmptySelection,
    InvalidData,
    InvalidProbability,
)
from .stats import (
    Population,
    _inverse_factor_or_singular,
    block_orthogonalize,
    cholesky,
    sample_covariance,
    tier_bounds,
)

ScoreSource = Union[ChiSquareMixture, np.ndarray]


def chi2_scores(dofs: Sequence[int], n_draws: int, seed: int) -> np.ndarray:
    """Materialize ``n_draws`` rows of independent chi-square scores."""
    mix = ChiSquareMixture.independent(dofs)
    return np.concatenate([mix.component_draws(seed, a, min(n_draws, a + CHUNK), rng.SCORES)
                           for a in range(0, n_draws, CHUNK)])


def _chunks(source: ScoreSource, n_draws: int, seed: int):
    if isinstance(source, ChiSquareMixture):
        for a in range(0, n_draws, CHUNK):
            yield source.component_draws(seed, a, min(n_draws, a + CHUNK), rng.SCORES)
    else:
        h = np.atleast_2d(np.asarray(source, dtype=np.float64))
        for a in range(0, h.shape[0], CHUNK):
            yield h[a:a + CHUNK]


def _weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidData("weights must be finite and non-negative")
    if not np.any(w > 0):
        raise DegenerateWeights("at least one weight must be positive")
    return w


# ---------------------------------------------------------------------------
# unified criteria
# ---------------------------------------------------------------------------


def calibrate_unified(
    weights,
    source,
    p: float,
    seed: int = 0,
    mc_draws: int = 1_000_000,
    family: str = "tier",
) -> tuple[Criterion, CalibrationResult]:
    """Unified rule ``sum_m pi_m h_m <= alpha`` with acceptance ``p``.

    ``source`` is a sequence of degrees of freedom (threshold from the
    chi-square mixture) or an ``(N, M)`` score matrix (empirical quantile,
    with the tie probability set so in-sample acceptance equals ``p`` as
    closely as the sample allows).  One score yields a
    :class:`MahalanobisThreshold`.
    """
    if not 0.0 < p < 1.0:
        raise InvalidProbability(f"target acceptance must lie in (0, 1), got {p!r}")
    w = _weights(weights)
    if isinstance(source, np.ndarray) and source.ndim == 2:
        h = source
        if h.shape[1] != w.size:
            raise InvalidData(f"{w.size} weights for {h.shape[1]} score columns")
        values = h @ w
        rank = max(1, math.ceil(p * values.size)) - 1
        alpha = float(np.partition(values, rank)[rank])
        below = int(np.count_nonzero(values < alpha))
        ties = int(np.count_nonzero(values == alpha))
        tie_prob = min(1.0, max(0.0, (p * values.size - below) / ties))
        achieved = (below + tie_prob * ties) / values.size
        cal = CalibrationResult(alpha, p, achieved, "empirical", int(values.size), None, 0.0)
        if w.size == 1:
            return MahalanobisThreshold(alpha / w[0]), cal
        return WeightedSumThreshold(tuple(w), alpha, tie_prob, family), cal
    dofs = tuple(int(k) for k in source)
    if len(dofs) != w.size:
        raise InvalidData(f"{w.size} weights for {len(dofs)} degrees of freedom")
    if w.size == 1:
        alpha = chi2_quantile(dofs[0], p)
        return MahalanobisThreshold(alpha), CalibrationResult(alpha, p, p, "closed_form")
    cal = mixture_quantile(ChiSquareMixture(tuple(w), dofs), p, mc_draws, seed)
    return WeightedSumThreshold(tuple(w), cal.threshold, 1.0, family), cal


def construct_unified(weights, source, p: float, seed: int = 0, mc_draws: int = 1_000_000, family: str = "tier") -> Criterion:
    return calibrate_unified(weights, source, p, seed, mc_draws, family)[0]


# ---------------------------------------------------------------------------
# dominance
# ---------------------------------------------------------------------------


@dataclass
class DominanceVerdict:
    """Whether ``phi`` is dominated by ``phi_prime`` on a common score source.

    Deltas are ``E[h_m | phi'] - E[h_m | phi]`` and ``E[phi'] - E[phi]``;
    their standard errors come from the paired influence functions of the
    ratio estimators.
    """

    dominated: bool
    per_score_deltas: np.ndarray
    per_score_se: np.ndarray
    acceptance_delta: float
    acceptance_delta_se: float
    strict_index: int | None
    acceptance: float
    acceptance_prime: float
    mean_scores: np.ndarray
    mean_scores_prime: np.ndarray
    draws: int
    seed: int | None
    tolerance: float

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, val in out.items():
            if isinstance(val, np.ndarray):
                out[key] = val.tolist()
        return out


def dominance_test(
    phi: Criterion,
    phi_prime: Criterion,
    source: ScoreSource,
    n_draws: int = 1_000_000,
    seed: int = 0,
    tolerance: float = 3.0,
) -> DominanceVerdict:
    """Paired Monte Carlo comparison of two criteria on the same score draws.

    ``phi`` is reported dominated when ``phi_prime`` has acceptance no
    lower and every average score no higher (each within ``tolerance``
    standard errors), with at least one average score lower by more than
    ``tolerance`` standard errors.
    """
    n = 0
    sa = sb = saa = sbb = sab = 0.0
    acc = None
    for h in _chunks(source, n_draws, seed):
        a = evaluate_scores(phi, h)
        b = evaluate_scores(phi_prime, h)
        if acc is None:
            acc = np.zeros((8, h.shape[1]))
        n += h.shape[0]
        sa += a.sum()
        sb += b.sum()
        saa += a @ a
        sbb += b @ b
        sab += a @ b
        h2 = h * h
        aa, bb, ab = a * a, b * b, a * b
        acc += np.stack([a @ h, b @ h, aa @ h, bb @ h, ab @ h, aa @ h2, bb @ h2, ab @ h2])
    if n == 0:
        raise InvalidData("score source is empty")
    if sa <= 0 or sb <= 0:
        raise AcceptanceTooRare(
            "a criterion accepted no score draw",
            observed_rate=min(sa, sb) / n,
        )
    sah, sbh, saah, sbbh, sabh, saahh, sbbhh, sabhh = acc
    big_a, big_b = sa / n, sb / n
    r, rp = sah / sa, sbh / sb
    # sum of squared paired influence values, expanded into streamed sums
    ss = (
        (sbbhh - 2 * rp * sbbh + rp * rp * sbb) / big_b ** 2
        + (saahh - 2 * r * saah + r * r * saa) / big_a ** 2
        - 2 * (sabhh - (r + rp) * sabh + r * rp * sab) / (big_a * big_b)
    )
    se = np.sqrt(np.maximum(ss, 0.0)) / n
    deltas = rp - r
    acc_delta = big_b - big_a
    acc_var = (saa - 2 * sab + sbb) / n - acc_delta ** 2
    acc_se = math.sqrt(max(acc_var, 0.0) / n)
    strict = (deltas < 0) & (deltas < -tolerance * se)
    dominated = bool(
        acc_delta >= -tolerance * acc_se
        and np.all(deltas <= tolerance * se)
        and np.any(strict)
    )
    strict_index = None
    if np.any(strict):
        z = np.where(se > 0, deltas / np.where(se > 0, se, 1.0), -np.inf)
        strict_index = int(np.argmin(np.where(strict, z, np.inf)))
    return DominanceVerdict(
        dominated=dominated,
        per_score_deltas=deltas,
        per_score_se=se,
        acceptance_delta=acc_delta,
        acceptance_delta_se=acc_se,
        strict_index=strict_index,
        acceptance=big_a,
        acceptance_prime=big_b,
        mean_scores=r,
        mean_scores_prime=rp,
        draws=n,
        seed=seed if isinstance(source, ChiSquareMixture) else None,
        tolerance=tolerance,
    )


def acceptance_rate(spec: Criterion, source: ScoreSource, n_draws: int = 1_000_000, seed: int = 0) -> float:
    total = hits = 0
    for h in _chunks(source, n_draws, seed):
        hits += float(evaluate_scores(spec, h).sum())
        total += h.shape[0]
    return hits / total


@dataclass
class UnifiedSearchResult:
    found: bool
    weights: tuple[float, ...] | None
    spec: Criterion | None
    verdict: DominanceVerdict | None
    tried: int

    def to_dict(self) -> dict:
        return {
            "found": self.found,
            "weights": list(self.weights) if self.weights else None,
            "criterion": to_json(self.spec) if self.spec is not None else None,
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "tried": self.tried,
        }


def weight_grid(m: int, step: float = 0.1) -> list[tuple[float, ...]]:
    """Strictly positive weight vectors on a simplex grid, largest entry scaled to 1."""
    steps = int(round(1 / step))
    out = set()
    for combo in itertools.product(range(1, steps + 1), repeat=m):
        top = max(combo)
        out.add(tuple(round(c / top, 12) for c in combo))
    return sorted(out)


def find_dominating_unified(
    phi: Criterion,
    scores: np.ndarray,
    step: float = 0.1,
    tolerance: float = 3.0,
) -> UnifiedSearchResult:
    """Search positive weights for a unified rule dominating ``phi``.

    Each candidate is calibrated in-sample to ``phi``'s acceptance on the
    same score matrix, so acceptance is matched exactly; the candidate with
    the most significant improvement is returned.  Failure is reported as
    ``found=False``.
    """
    p = acceptance_rate(phi, scores)
    best = None
    grid = weight_grid(scores.shape[1], step)
    for w in grid:
        spec = construct_unified(w, scores, p)
        verdict = dominance_test(phi, spec, scores, tolerance=tolerance)
        if not verdict.dominated:
            continue
        worst = float(np.max(verdict.per_score_deltas / np.maximum(verdict.per_score_se, 1e-300)))
        if best is None or worst < best[0]:
            best = (worst, w, spec, verdict)
    if best is None:
        return UnifiedSearchResult(False, None, None, None, len(grid))
    return UnifiedSearchResult(True, best[1], best[2], best[3], len(grid))


# ---------------------------------------------------------------------------
# inquiry cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    costs: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(v) for v in self.costs)
        if not c or min(c) <= 0 or not all(math.isfinite(v) for v in c):
            raise InvalidData("stage costs must be positive and finite")
        object.__setattr__(self, "costs", c)


@dataclass
class CostResult:
    expected_cost: float
    se: float
    full_cost: float
    savings: float
    reach_rates: list[float]
    stage_acceptance: list[float]
    final_acceptance: float
    draws: int
    seed: int | None

    def closed_form(self, costs: Sequence[float]) -> float:
        """``sum_m c_m Pr(pass stages < m)`` from the estimated reach rates."""
        return float(np.dot(costs, self.reach_rates))

    def to_dict(self) -> dict:
        return asdict(self)


def expected_cost(
    stages: Sequence[Criterion],
    cost: CostModel,
    source: ScoreSource,
    n_draws: int = 1_000_000,
    seed: int = 0,
) -> CostResult:
    """Expected inquiry cost of checking stages in order until the first rejection.

    Stage ``m`` is paid for whenever stages ``1..m-1`` all accepted; with
    stochastic stages the pass indicator is replaced by its probability.
    """
    stages = list(stages)
    if len(stages) < 2:
        raise InvalidData("cost accounting needs at least two stages")
    if len(cost.costs) != len(stages):
        raise InvalidData("one cost per stage required")
    c = np.asarray(cost.costs)
    m = len(stages)
    n = 0
    s1 = s2 = 0.0
    reach = np.zeros(m)
    marginal = np.zeros(m)
    final = 0.0
    for h in _chunks(source, n_draws, seed):
        phis = np.column_stack([evaluate_scores(s, h) for s in stages])
        cum = np.cumprod(np.column_stack([np.ones(h.shape[0]), phis[:, :-1]]), axis=1)
        per = cum @ c
        n += h.shape[0]
        s1 += per.sum()
        s2 += per @ per
        reach += cum.sum(axis=0)
        marginal += phis.sum(axis=0)
        final += float(np.prod(phis, axis=1).sum())
    mean = s1 / n
    se = math.sqrt(max(s2 / n - mean * mean, 0.0) / n)
    full = float(c.sum())
    return CostResult(
        expected_cost=mean,
        se=se,
        full_cost=full,
        savings=full - mean,
        reach_rates=(reach / n).tolist(),
        stage_acceptance=(marginal / n).tolist(),
        final_acceptance=final / n,
        draws=n,
        seed=seed if isinstance(source, ChiSquareMixture) else None,
    )


# ---------------------------------------------------------------------------
# candidate selection
# ---------------------------------------------------------------------------


def _score_table(scores, weights) -> tuple[np.ndarray, np.ndarray]:
    h = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != h.shape[1]:
        raise InvalidData(f"{w.size} weights for {h.shape[1]} scores")
    if np.any(w <= 0):
        raise InvalidData("selection weights must be positive")
    return h, w


def select_candidates(scores, n0: int, weights) -> np.ndarray:
    """Indices (ascending) of the ``n0`` smallest weighted scores; ties go to the lower index."""
    h, w = _score_table(scores, weights)
    if not 1 <= n0 <= h.shape[0]:
        raise InvalidData(f"need 1 <= n0 <= {h.shape[0]}, got {n0}")
    total = h @ w
    order = np.lexsort((np.arange(total.size), total))
    return np.sort(order[:n0])


@dataclass
class StagedSelection:
    selected: np.ndarray
    inquiries: int
    survivors: list[int] = field(default_factory=list)


def staged_select(scores, thresholds: Sequence[float], weights, n0: int | None = None) -> StagedSelection:
    """Stage-wise elimination on cumulative weighted scores.

    At stage ``m`` each surviving candidate's score ``h_m`` is inquired and
    candidates with ``sum_{l<=m} pi_l h_l > thresholds[m]`` are dropped.
    With ``n0`` set, the ``n0`` survivors of smallest total weighted score
    are kept (all survivors if fewer remain).
    """
    h, w = _score_table(scores, weights)
    if len(thresholds) != h.shape[1]:
        raise InvalidData("one threshold per stage required")
    alive = np.arange(h.shape[0])
    cum = np.zeros(h.shape[0])
    inquiries = 0
    survivors = []
    for m, alpha in enumerate(thresholds):
        inquiries += alive.size
        cum[alive] += w[m] * h[alive, m]
        alive = alive[cum[alive] <= alpha]
        survivors.append(int(alive.size))
        if alive.size == 0:
            raise EmptySelection(f"every candidate eliminated at stage {m}", stage=m)
    if n0 is not None and n0 < alive.size:
        order = np.lexsort((alive, cum[alive]))
        alive = np.sort(alive[order[:n0]])
    return StagedSelection(alive, inquiries, survivors)


# ---------------------------------------------------------------------------
# asymptotic variances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AsymptoticVarianceInputs:
    """Large-sample inputs: ``var_g0``, per-block ``r2`` and ``dofs``, plus
    either unified ``weights`` with ``alpha`` (or target ``acceptance``) or
    per-block ``alphas``."""

    var_g0: float
    r2: tuple[float, ...]
    dofs: tuple[int, ...]
    weights: tuple[float, ...] | None = None
    alpha: float | None = None
    acceptance: float | None = None
    alphas: tuple[float, ...] | None = None

    def __post_init__(self):
        r2 = tuple(float(v) for v in self.r2)
        dofs = tuple(int(k) for k in self.dofs)
        if not self.var_g0 > 0:
            raise InvalidData("var_g0 must be positive")
        if len(r2) != len(dofs) or not r2:
            raise InvalidData("one R^2 per block required")
        if min(r2) < 0 or sum(r2) > 1 + 1e-12:
            raise InvalidData("R^2 values must be non-negative with sum <= 1")
        if min(dofs) < 1:
            raise InvalidData("degrees of freedom must be positive")
        object.__setattr__(self, "r2", r2)
        object.__setattr__(self, "dofs", dofs)
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(v) for v in self.weights))
        if self.alphas is not None:
            object.__setattr__(self, "alphas", tuple(float(v) for v in self.alphas))


@dataclass
class VarianceEstimate:
    value: float
    se: float
    truncated_means: list[float]
    alpha: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def asymptotic_variance_unified_tiers(
    inputs: AsymptoticVarianceInputs,
    mc_draws: int = 1_000_000,
    seed: int = 0,
) -> VarianceEstimate:
    """``var_g0 * sum_t R2_t / k_t * E[chi2_{k_t} | sum pi chi2 <= alpha] + var_g0 * (1 - sum R2)``."""
    if inputs.weights is None:
        raise InvalidData("unified variance needs weights")
    w = _weights(inputs.weights)
    if w.size != len(inputs.dofs):
        raise InvalidData("one weight per block required")
    mix = ChiSquareMixture(tuple(w), inputs.dofs)
    alpha = inputs.alpha
    if alpha is None:
        if inputs.acceptance is None:
            raise InvalidData("unified variance needs alpha or a target acceptance")
        alpha = mixture_quantile(mix, inputs.acceptance, mc_draws, seed).threshold
    means, ses = [], []
    for t in range(mix.m):
        est = truncated_mixture_component_mean(mix, alpha, t, mc_draws, seed)
        means.append(est.value)
        ses.append(est.se)
    g = inputs.var_g0
    terms = [r / k for r, k in zip(inputs.r2, inputs.dofs)]
    value = g * sum(c * e for c, e in zip(terms, means)) + g * (1 - sum(inputs.r2))
    se = g * math.sqrt(sum((c * s) ** 2 for c, s in zip(terms, ses)))
    return VarianceEstimate(value, se, means, alpha)


def intersection_alphas(dofs: Sequence[int], per_block_acceptance: Sequence[float]) -> tuple[float, ...]:
    return tuple(chi2_quantile(k, p) for k, p in zip(dofs, per_block_acceptance))


def asymptotic_variance_intersection_tiers(inputs: AsymptoticVarianceInputs) -> VarianceEstimate:
    """``var_g0 * sum_t R2_t v_{k_t, alpha_t} + var_g0 * (1 - sum R2)`` (closed form)."""
    if inputs.alphas is None or len(inputs.alphas) != len(inputs.dofs):
        raise InvalidData("intersection variance needs one threshold per block")
    means = [k * v_factor(k, a) for k, a in zip(inputs.dofs, inputs.alphas)]
    g = inputs.var_g0
    value = g * sum(r / k * e for r, k, e in zip(inputs.r2, inputs.dofs, means)) + g * (1 - sum(inputs.r2))
    return VarianceEstimate(value, 0.0, means)


@dataclass(frozen=True)
class StratifiedVarianceInputs:
    """Per-stratum inputs for a lambda-weighted combination of stratum effects.

    ``var_g0j`` and ``r2_0j`` are the within-stratum outcome variances and
    squared multiple correlations, ``lambdas`` the combination weights and
    ``stratum_sizes`` the ``n_j``; every stratum has ``k_r`` covariates.
    """

    var_g0j: tuple[float, ...]
    r2_0j: tuple[float, ...]
    lambdas: tuple[float, ...]
    stratum_sizes: tuple[int, ...]
    k_r: int
    weights: tuple[float, ...] | None = None
    alpha: float | None = None
    acceptance: float | None = None
    alphas: tuple[float, ...] | None = None

    def zeta(self) -> np.ndarray:
        sizes = np.asarray(self.stratum_sizes, dtype=np.float64)
        return np.asarray(self.lambdas, dtype=np.float64) ** 2 * sizes.sum() / sizes

    def pooled(self) -> AsymptoticVarianceInputs:
        j = len(self.stratum_sizes)
        if not (len(self.var_g0j) == len(self.r2_0j) == len(self.lambdas) == j):
            raise InvalidData("one entry per stratum required")
        zeta = self.zeta()
        part = zeta * np.asarray(self.var_g0j, dtype=np.float64)
        var_g0 = float(part.sum())
        r2 = part * np.asarray(self.r2_0j, dtype=np.float64) / var_g0
        return AsymptoticVarianceInputs(
            var_g0, tuple(r2), (self.k_r,) * j, self.weights, self.alpha, self.acceptance, self.alphas
        )


def asymptotic_variance_stratified(
    inputs: StratifiedVarianceInputs,
    method: str = "unified",
    mc_draws: int = 1_000_000,
    seed: int = 0,
) -> VarianceEstimate:
    pooled = inputs.pooled()
    if method == "unified":
        return asymptotic_variance_unified_tiers(pooled, mc_draws, seed)
    if method == "intersection":
        return asymptotic_variance_intersection_tiers(pooled)
    raise InvalidData(f"method must be 'unified' or 'intersection', got {method!r}")


# ---------------------------------------------------------------------------
# weights and R^2
# ---------------------------------------------------------------------------


def optimal_tier_weights(r2: Sequence[float], dofs: Sequence[int]) -> np.ndarray:
    """``pi_t = R2_t / k_t``, scaled so the largest weight is 1."""
    r = np.asarray(r2, dtype=np.float64)
    k = np.asarray(dofs, dtype=np.float64)
    if r.shape != k.shape or r.size == 0:
        raise InvalidData("one R^2 per tier required")
    if np.any(r < 0) or np.any(k <= 0):
        raise InvalidData("R^2 must be non-negative and dofs positive")
    pi = r / k
    if pi.max() <= 0:
        raise DegenerateWeights("all R^2 are zero")
    return pi / pi.max()


def largest_eigenvalue(s: np.ndarray, tol: float = 1e-14, max_iter: int = 100_000) -> float:
    """Largest eigenvalue of a symmetric positive definite matrix by power iteration."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    cholesky(s)
    k = s.shape[0]
    v = 1.0 + np.arange(k) / (k + math.pi)
    v /= np.linalg.norm(v)
    lam = float(v @ s @ v)
    for _ in range(max_iter):
        u = s @ v
        v = u / np.linalg.norm(u)
        new = float(v @ s @ v)
        if abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    return lam


def heuristic_stratum_weights(covariances: Sequence[np.ndarray], zeta: Sequence[float], p: Sequence[float]) -> np.ndarray:
    """``pi_j`` proportional to ``zeta_j / (p_j (1 - p_j)) * lambda_max(S_j)``, largest scaled to 1."""
    if not (len(covariances) == len(zeta) == len(p)):
        raise InvalidData("one covariance, zeta and propensity per stratum required")
    z = np.asarray(zeta, dtype=np.float64)
    pj = np.asarray(p, dtype=np.float64)
    if np.any(z <= 0) or np.any(pj <= 0) or np.any(pj >= 1):
        raise InvalidData("zeta must be positive and propensities in (0, 1)")
    lam = np.array([largest_eigenvalue(s) for s in covariances])
    pi = z / (pj * (1 - pj)) * lam
    return pi / pi.max()


def center_outcome(pop: Population, p: float) -> np.ndarray:
    """``(1 - p) Y(1) + p Y(0)``: its treated-minus-control mean difference equals the estimation error."""
    if pop.y0 is None or pop.y1 is None:
        raise InvalidData("population has no potential outcomes")
    return (1 - p) * pop.y1 + p * pop.y0


def tier_r2(pop: Population, p: float, tier_sizes: Sequence[int] | None = None) -> np.ndarray:
    """Squared multiple correlation of the center outcome with each orthogonalized tier."""
    sizes = tuple(tier_sizes or pop.tier_sizes or (pop.k,))
    y = center_outcome(pop, p)
    e, _ = block_orthogonalize(pop.values, sizes)
    yc = y - y.mean()
    ec = e - e.mean(axis=0)
    var_y = float(yc @ yc) / (pop.n - 1)
    if var_y <= 0:
        raise DegenerateWeights("center outcome has zero variance")
    s_ye = yc @ ec / (pop.n - 1)
    out = []
    for t, (lo, hi) in enumerate(tier_bounds(sizes)):
        lf = _inverse_factor_or_singular(sample_covariance(e[:, lo:hi]), f"tier {t} residual")
        out.append(float(np.sum((s_ye[lo:hi] @ lf) ** 2)) / var_y)
    return np.asarray(out)


def r2_by_block(cov: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Block R^2 of the first coordinate on later coordinate blocks.

    ``cov`` is the joint covariance of ``(g0, g_1, ..., g_T)``.
    """
    cov = np.asarray(cov, dtype=np.float64)
    out = []
    for lo, hi in tier_bounds(sizes):
        c = cov[0, 1 + lo:1 + hi]
        out.append(float(c @ np.linalg.solve(cov[1 + lo:1 + hi, 1 + lo:1 + hi], c)) / cov[0, 0])
    return np.asarray(out)


def nu_by_block(cov_all: np.ndarray, cov_accepted: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """``trace(C_all^-1 C_acc) / k_t`` per block: the proportional shrinkage factor."""
    out = []
    for lo, hi in tier_bounds(sizes):
        a = np.asarray(cov_all)[lo:hi, lo:hi]
        b = np.asarray(cov_accepted)[lo:hi, lo:hi]
        out.append(float(np.trace(np.linalg.solve(a, b))) / (hi - lo))
    return np.asarray(out)
