"""Balance criteria: declarative trees evaluated to acceptance probabilities.

A criterion maps ``(covariates, assignment)`` to a probability in [0, 1].
Leaves threshold one score family (Mahalanobis, tiers, strata or
per-covariate scores); :class:`Intersection` multiplies children and
:class:`Stochastic` accepts with a constant probability.  The same tree can
also be evaluated directly on a matrix of score vectors, which is how
criteria are compared on asymptotic chi-square score distributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import InsufficientStratum, InvalidCriterion, InvalidData, ZeroVariance
from .stats import (
    Population,
    _inverse_factor_or_singular,
    block_orthogonalize,
    group_mean_diff,
    sample_covariance,
    tier_bounds,
)

SCHEMA = "rerand/criterion/v1"
FAMILIES = ("mahalanobis", "tier", "stratum", "covariate")


@dataclass(frozen=True)
class Assignment:
    """A binary treatment vector with both groups non-empty."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w)
        if w.ndim != 1 or not np.all((w == 0) | (w == 1)):
            raise InvalidData("assignment must be a binary vector")
        w = w.astype(np.int8)
        if w.sum() < 1 or w.sum() > w.size - 1:
            raise InvalidData("assignment needs at least one treated and one control unit")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def __array__(self, dtype=None, copy=None):
        return self.w.astype(dtype) if dtype is not None else self.w

    @property
    def n(self) -> int:
        return self.w.size

    @property
    def n1(self) -> int:
        return int(self.w.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def p(self) -> float:
        return self.n1 / self.n

    def stratum_counts(self, strata: np.ndarray) -> tuple[int, ...]:
        strata = np.asarray(strata)
        return tuple(int(self.w[strata == j].sum()) for j in range(int(strata.max()) + 1))


@dataclass(frozen=True)
class ScoreVector:
    labels: tuple[str, ...]
    scores: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return {lab: float(v) for lab, v in zip(self.labels, self.scores)}


# ---------------------------------------------------------------------------
# criterion nodes
# ---------------------------------------------------------------------------


def _prob(p, what: str, allow_zero: bool = False) -> float:
    p = float(p)
    lo_ok = p >= 0 if allow_zero else p > 0
    if not (lo_ok and p <= 1):
        raise InvalidCriterion(f"{what} must lie in {'[0, 1]' if allow_zero else '(0, 1]'}, got {p!r}")
    return p


def _threshold(a) -> float:
    a = float(a)
    if np.isnan(a):
        raise InvalidCriterion("threshold is NaN")
    return a


@dataclass(frozen=True)
class MahalanobisThreshold:
    """Accept iff the Mahalanobis distance over all covariates is <= alpha."""

    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", _threshold(self.alpha))


@dataclass(frozen=True)
class TierScoreThreshold:
    """Accept iff the (0-based) tier score is <= alpha."""

    tier: int
    alpha: float

    def __post_init__(self):
        if int(self.tier) < 0:
            raise InvalidCriterion("tier index must be >= 0")
        object.__setattr__(self, "tier", int(self.tier))
        object.__setattr__(self, "alpha", _threshold(self.alpha))


@dataclass(frozen=True)
class StratumScoreThreshold:
    """Accept iff the (0-based) stratum-specific Mahalanobis score is <= alpha."""

    stratum: int
    alpha: float

    def __post_init__(self):
        if int(self.stratum) < 0:
            raise InvalidCriterion("stratum index must be >= 0")
        object.__setattr__(self, "stratum", int(self.stratum))
        object.__setattr__(self, "alpha", _threshold(self.alpha))


@dataclass(frozen=True)
class WeightedSumThreshold:
    """Unified rule on ``sum_m weights[m] * h_m`` for one score family.

    Accept below ``alpha``, accept with probability ``tie_prob`` exactly at
    ``alpha``, reject above.  With every weight positive the rule belongs to
    the admissible class (:attr:`admissible_form`).
    """

    weights: tuple[float, ...]
    alpha: float
    tie_prob: float = 1.0
    family: str = "tier"

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if not w or min(w) < 0 or max(w) <= 0 or not all(np.isfinite(w)):
            raise InvalidCriterion("weights must be finite, non-negative and not all zero")
        if self.family not in FAMILIES:
            raise InvalidCriterion(f"unknown score family {self.family!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "alpha", _threshold(self.alpha))
        object.__setattr__(self, "tie_prob", _prob(self.tie_prob, "tie_prob", allow_zero=True))

    @property
    def admissible_form(self) -> bool:
        return min(self.weights) > 0


@dataclass(frozen=True)
class PerCovariateBounds:
    """Accept iff every standardized squared mean difference is within its bound."""

    bounds: tuple[float, ...]

    def __post_init__(self):
        b = tuple(_threshold(v) for v in self.bounds)
        if not b:
            raise InvalidCriterion("at least one bound required")
        object.__setattr__(self, "bounds", b)


@dataclass(frozen=True)
class Stratification:
    """Accept iff the treated count in every stratum equals the plan."""

    treated: tuple[int, ...]

    def __post_init__(self):
        t = tuple(int(v) for v in self.treated)
        if not t or min(t) < 0:
            raise InvalidCriterion("per-stratum treated counts must be non-negative")
        object.__setattr__(self, "treated", t)


@dataclass(frozen=True)
class Intersection:
    """Product of the children's acceptance probabilities."""

    children: tuple["Criterion", ...]

    def __post_init__(self):
        kids = tuple(self.children)
        if not kids:
            raise InvalidCriterion("intersection needs at least one child")
        object.__setattr__(self, "children", kids)


@dataclass(frozen=True)
class Stochastic:
    """Constant acceptance probability ``p`` in (0, 1]."""

    p: float

    def __post_init__(self):
        object.__setattr__(self, "p", _prob(self.p, "acceptance probability"))


Criterion = Union[
    MahalanobisThreshold,
    TierScoreThreshold,
    StratumScoreThreshold,
    WeightedSumThreshold,
    PerCovariateBounds,
    Stratification,
    Intersection,
    Stochastic,
]


def walk(spec: Criterion) -> Iterator[Criterion]:
    yield spec
    if isinstance(spec, Intersection):
        for child in spec.children:
            yield from walk(child)


def families_used(spec: Criterion) -> list[str]:
    """Score families referenced by a criterion, in first-use order."""
    out: list[str] = []
    for node in walk(spec):
        fam = _family_of(node)
        if fam and fam not in out:
            out.append(fam)
    return out


def _family_of(node) -> str | None:
    if isinstance(node, MahalanobisThreshold):
        return "mahalanobis"
    if isinstance(node, TierScoreThreshold):
        return "tier"
    if isinstance(node, StratumScoreThreshold):
        return "stratum"
    if isinstance(node, WeightedSumThreshold):
        return node.family
    if isinstance(node, PerCovariateBounds):
        return "covariate"
    return None


def is_deterministic(spec: Criterion) -> bool:
    for node in walk(spec):
        if isinstance(node, Stochastic) and node.p < 1:
            return False
        if isinstance(node, WeightedSumThreshold) and 0 < node.tie_prob < 1:
            return False
    return True


# ---------------------------------------------------------------------------
# score computation
# ---------------------------------------------------------------------------


class Scorer:
    """Per-population precomputation for vectorized score evaluation.

    Factorizations are computed lazily, once per family, so a single
    instance can score many batches of assignments.
    """

    def __init__(self, pop: Population):
        self.pop = pop
        self._cache: dict[str, object] = {}

    def _get(self, family: str):
        if family not in self._cache:
            self._cache[family] = getattr(self, f"_prepare_{family}")()
        return self._cache[family]

    def _prepare_mahalanobis(self):
        return _inverse_factor_or_singular(sample_covariance(self.pop.values), "covariate")

    def _prepare_tier(self):
        if self.pop.tier_sizes is None:
            raise InvalidCriterion("tier scores need a tier partition on the population")
        e, record = block_orthogonalize(self.pop.values, self.pop.tier_sizes)
        factors = []
        for t, (lo, hi) in enumerate(tier_bounds(self.pop.tier_sizes)):
            factors.append(_inverse_factor_or_singular(sample_covariance(e[:, lo:hi]), f"tier {t} residual"))
        return e, factors

    def _prepare_stratum(self):
        pop = self.pop
        if pop.strata is None:
            raise InvalidCriterion("stratum scores need stratum codes on the population")
        cols = pop.remaining_columns()
        if not cols:
            raise InvalidCriterion("no covariates remain after removing the stratum column")
        out = []
        for j in range(pop.n_strata):
            rows = np.flatnonzero(pop.strata == j)
            if rows.size < 2:
                raise InsufficientStratum(f"stratum {j} has fewer than two units", stratum=j)
            xr = pop.values[np.ix_(rows, cols)]
            out.append((rows, xr, _inverse_factor_or_singular(sample_covariance(xr), f"stratum {j}")))
        return out

    def _prepare_covariate(self):
        var = np.diag(sample_covariance(self.pop.values))
        if np.any(var <= 0):
            bad = [self.pop.labels[i] for i in np.flatnonzero(var <= 0)]
            raise ZeroVariance(f"zero-variance covariates: {bad}", columns=bad)
        return var

    def labels(self, family: str) -> tuple[str, ...]:
        pop = self.pop
        if family == "mahalanobis":
            return ("mahalanobis",)
        if family == "tier":
            if pop.tier_sizes is None:
                raise InvalidCriterion("tier scores need a tier partition on the population")
            return tuple(f"tier:{t}" for t in range(len(pop.tier_sizes)))
        if family == "stratum":
            if pop.strata is None:
                raise InvalidCriterion("stratum scores need stratum codes on the population")
            return tuple(f"stratum:{j}" for j in range(pop.n_strata))
        if family == "covariate":
            return tuple(f"covariate:{lab}" for lab in pop.labels)
        raise InvalidCriterion(f"unknown score family {family!r}")

    def scores(self, family: str, w) -> np.ndarray:
        """Scores of ``family`` for a batch ``(B, n)`` (or one ``(n,)``) of assignments."""
        wv = np.asarray(w, dtype=np.float64)
        single = wv.ndim == 1
        wv = np.atleast_2d(wv)
        out = getattr(self, f"_score_{family}")(wv)
        return out[0] if single else out

    def _factor(self, wv: np.ndarray) -> np.ndarray:
        n = wv.shape[1]
        p = wv.sum(axis=1) / n
        return n * p * (1 - p)

    def _score_mahalanobis(self, wv):
        lf = self._get("mahalanobis")
        d = group_mean_diff(self.pop.values, wv)
        return (self._factor(wv) * np.sum((d @ lf) ** 2, axis=1))[:, None]

    def _score_tier(self, wv):
        e, factors = self._get("tier")
        d = group_mean_diff(e, wv)
        c = self._factor(wv)
        cols = [c * np.sum((d[:, lo:hi] @ lf) ** 2, axis=1) for (lo, hi), lf in zip(tier_bounds(self.pop.tier_sizes), factors)]
        return np.column_stack(cols)

    def _score_stratum(self, wv):
        cols = []
        for j, (rows, xr, lf) in enumerate(self._get("stratum")):
            ws = wv[:, rows]
            n1 = ws.sum(axis=1)
            n0 = rows.size - n1
            if np.any(n1 < 2) or np.any(n0 < 2):
                raise InsufficientStratum(
                    f"stratum {j} needs at least two treated and two control units", stratum=j
                )
            d = group_mean_diff(xr, ws)
            pj = n1 / rows.size
            # leading factor uses the stratum size n_j
            cols.append(rows.size * pj * (1 - pj) * np.sum((d @ lf) ** 2, axis=1))
        return np.column_stack(cols)

    def _score_covariate(self, wv):
        var = self._get("covariate")
        d = group_mean_diff(self.pop.values, wv)
        return self._factor(wv)[:, None] * d ** 2 / var


def tier_scores(pop: Population, w, tier_sizes: Sequence[int] | None = None) -> ScoreVector:
    if tier_sizes is not None:
        pop = pop.select(pop.labels, tier_sizes)
    s = Scorer(pop)
    return ScoreVector(s.labels("tier"), s.scores("tier", np.asarray(w)))


def stratum_scores(pop: Population, w) -> ScoreVector:
    s = Scorer(pop)
    return ScoreVector(s.labels("stratum"), s.scores("stratum", np.asarray(w)))


def per_covariate_bounds_scores(pop: Population, w) -> ScoreVector:
    s = Scorer(pop)
    return ScoreVector(s.labels("covariate"), s.scores("covariate", np.asarray(w)))


def score_vector(spec: Criterion, pop: Population | Scorer, w) -> ScoreVector:
    """All scores a criterion depends on, family by family in first-use order."""
    scorer = pop if isinstance(pop, Scorer) else Scorer(pop)
    labels: list[str] = []
    vals: list[np.ndarray] = []
    for fam in families_used(spec):
        labels.extend(scorer.labels(fam))
        vals.append(np.atleast_1d(scorer.scores(fam, np.asarray(w))))
    if not vals:
        return ScoreVector((), np.zeros(0))
    return ScoreVector(tuple(labels), np.concatenate(vals, axis=-1))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _threshold_prob(value: np.ndarray, alpha: float, tie_prob: float = 1.0) -> np.ndarray:
    out = (value < alpha).astype(np.float64)
    if tie_prob:
        out[value == alpha] = tie_prob
    return out


def _check_index(index: int, size: int, what: str):
    if index >= size:
        raise InvalidCriterion(f"{what} index {index} out of range for {size} scores")


def _eval(node, get_scores, strata_ok, batch: int) -> np.ndarray:
    if isinstance(node, Intersection):
        out = np.ones(batch)
        for child in node.children:
            out *= _eval(child, get_scores, strata_ok, batch)
        return out
    if isinstance(node, Stochastic):
        return np.full(batch, node.p)
    if isinstance(node, Stratification):
        return strata_ok(node)
    if isinstance(node, MahalanobisThreshold):
        return _threshold_prob(get_scores("mahalanobis")[:, 0], node.alpha)
    if isinstance(node, TierScoreThreshold):
        h = get_scores("tier")
        _check_index(node.tier, h.shape[1], "tier")
        return _threshold_prob(h[:, node.tier], node.alpha)
    if isinstance(node, StratumScoreThreshold):
        h = get_scores("stratum")
        _check_index(node.stratum, h.shape[1], "stratum")
        return _threshold_prob(h[:, node.stratum], node.alpha)
    if isinstance(node, WeightedSumThreshold):
        h = get_scores(node.family)
        if h.shape[1] != len(node.weights):
            raise InvalidCriterion(f"{len(node.weights)} weights for {h.shape[1]} {node.family} scores")
        return _threshold_prob(h @ np.asarray(node.weights), node.alpha, node.tie_prob)
    if isinstance(node, PerCovariateBounds):
        h = get_scores("covariate")
        if h.shape[1] != len(node.bounds):
            raise InvalidCriterion(f"{len(node.bounds)} bounds for {h.shape[1]} covariates")
        return np.all(h <= np.asarray(node.bounds), axis=1).astype(np.float64)
    raise InvalidCriterion(f"unknown criterion node {type(node).__name__}")


def evaluate_batch(spec: Criterion, scorer: Scorer, w: np.ndarray) -> np.ndarray:
    """Acceptance probabilities for a ``(B, n)`` batch of assignments."""
    wv = np.atleast_2d(np.asarray(w, dtype=np.float64))
    cache: dict[str, np.ndarray] = {}

    def get_scores(family):
        if family not in cache:
            cache[family] = scorer.scores(family, wv)
        return cache[family]

    def strata_ok(node: Stratification):
        strata = scorer.pop.strata
        if strata is None:
            raise InvalidCriterion("stratification needs stratum codes on the population")
        if len(node.treated) != scorer.pop.n_strata:
            raise InvalidCriterion(f"plan lists {len(node.treated)} strata, population has {scorer.pop.n_strata}")
        ok = np.ones(wv.shape[0], dtype=bool)
        for j, want in enumerate(node.treated):
            ok &= wv[:, strata == j].sum(axis=1) == want
        return ok.astype(np.float64)

    return _eval(spec, get_scores, strata_ok, wv.shape[0])


def evaluate(spec: Criterion, pop: Population | Scorer, w) -> float:
    """Acceptance probability of one assignment (the probability, not a coin flip)."""
    scorer = pop if isinstance(pop, Scorer) else Scorer(pop)
    wv = np.asarray(w)
    if wv.ndim != 1:
        raise InvalidData("evaluate takes a single assignment; use evaluate_batch for batches")
    return float(evaluate_batch(spec, scorer, wv[None, :])[0])


def evaluate_scores(spec: Criterion, scores: np.ndarray) -> np.ndarray:
    """Evaluate on score vectors directly (rows = samples, columns = h_1..h_M).

    Every family maps onto the same columns; Mahalanobis thresholds read
    column 0 and stratification nodes are treated as satisfied.
    """
    h = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return _eval(spec, lambda family: h, lambda node: np.ones(h.shape[0]), h.shape[0])


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

_FIELDS = {
    "mahalanobis": {"alpha"},
    "tier": {"tier", "alpha"},
    "stratum": {"stratum", "alpha"},
    "weighted_sum": {"weights", "alpha", "tie_prob", "family"},
    "per_covariate_bounds": {"bounds"},
    "stratification": {"treated"},
    "intersection": {"children"},
    "stochastic": {"p"},
}


def _num(v) -> str:
    v = float(v)
    return repr(v) if np.isfinite(v) else ("inf" if v > 0 else "-inf")


def to_json(spec: Criterion) -> dict:
    """Serialize to plain JSON types; reals become exact round-trip strings."""
    if isinstance(spec, MahalanobisThreshold):
        return {"kind": "mahalanobis", "alpha": _num(spec.alpha)}
    if isinstance(spec, TierScoreThreshold):
        return {"kind": "tier", "tier": spec.tier, "alpha": _num(spec.alpha)}
    if isinstance(spec, StratumScoreThreshold):
        return {"kind": "stratum", "stratum": spec.stratum, "alpha": _num(spec.alpha)}
    if isinstance(spec, WeightedSumThreshold):
        return {
            "kind": "weighted_sum",
            "family": spec.family,
            "weights": [_num(v) for v in spec.weights],
            "alpha": _num(spec.alpha),
            "tie_prob": _num(spec.tie_prob),
        }
    if isinstance(spec, PerCovariateBounds):
        return {"kind": "per_covariate_bounds", "bounds": [_num(v) for v in spec.bounds]}
    if isinstance(spec, Stratification):
        return {"kind": "stratification", "treated": list(spec.treated)}
    if isinstance(spec, Intersection):
        return {"kind": "intersection", "children": [to_json(c) for c in spec.children]}
    if isinstance(spec, Stochastic):
        return {"kind": "stochastic", "p": _num(spec.p)}
    raise InvalidCriterion(f"cannot serialize {type(spec).__name__}")


def _real(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise InvalidCriterion(f"{where}: expected a number or decimal string")
    try:
        return float(v)
    except ValueError as exc:
        raise InvalidCriterion(f"{where}: {v!r} is not a number") from exc


def _int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise InvalidCriterion(f"{where}: expected an integer")
    return v


def from_json(node: dict, path: str = "criterion") -> Criterion:
    if not isinstance(node, dict) or "kind" not in node:
        raise InvalidCriterion(f"{path}: expected an object with a 'kind'")
    kind = node["kind"]
    if kind not in _FIELDS:
        raise InvalidCriterion(f"{path}: unknown kind {kind!r}")
    extra = set(node) - _FIELDS[kind] - {"kind"}
    if extra:
        raise InvalidCriterion(f"{path}: unknown fields {sorted(extra)}")
    required = _FIELDS[kind] - {"tie_prob", "family"}
    missing = required - set(node)
    if missing:
        raise InvalidCriterion(f"{path}: missing fields {sorted(missing)}")
    if kind == "mahalanobis":
        return MahalanobisThreshold(_real(node["alpha"], f"{path}.alpha"))
    if kind == "tier":
        return TierScoreThreshold(_int(node["tier"], f"{path}.tier"), _real(node["alpha"], f"{path}.alpha"))
    if kind == "stratum":
        return StratumScoreThreshold(_int(node["stratum"], f"{path}.stratum"), _real(node["alpha"], f"{path}.alpha"))
    if kind == "weighted_sum":
        return WeightedSumThreshold(
            tuple(_real(v, f"{path}.weights") for v in node["weights"]),
            _real(node["alpha"], f"{path}.alpha"),
            _real(node.get("tie_prob", 1.0), f"{path}.tie_prob"),
            node.get("family", "tier"),
        )
    if kind == "per_covariate_bounds":
        return PerCovariateBounds(tuple(_real(v, f"{path}.bounds") for v in node["bounds"]))
    if kind == "stratification":
        return Stratification(tuple(_int(v, f"{path}.treated") for v in node["treated"]))
    if kind == "intersection":
        kids = node["children"]
        if not isinstance(kids, list):
            raise InvalidCriterion(f"{path}.children must be a list")
        return Intersection(tuple(from_json(c, f"{path}.children[{i}]") for i, c in enumerate(kids)))
    return Stochastic(_real(node["p"], f"{path}.p"))


def dump_document(spec: Criterion, tier_sizes: Sequence[int] | None = None) -> dict:
    doc = {"schema": SCHEMA, "criterion": to_json(spec)}
    if tier_sizes is not None:
        doc["tier_sizes"] = list(tier_sizes)
    return doc


def load_document(doc: dict) -> tuple[Criterion, tuple[int, ...] | None]:
    """Parse a versioned criterion document; returns ``(spec, tier_sizes)``."""
    if not isinstance(doc, dict):
        raise InvalidCriterion("criterion document must be a JSON object")
    if doc.get("schema") != SCHEMA:
        raise InvalidCriterion(f"schema must be {SCHEMA!r}, got {doc.get('schema')!r}")
    extra = set(doc) - {"schema", "criterion", "tier_sizes"}
    if extra:
        raise InvalidCriterion(f"unknown top-level fields {sorted(extra)}")
    if "criterion" not in doc:
        raise InvalidCriterion("document has no 'criterion'")
    tiers = doc.get("tier_sizes")
    if tiers is not None:
        tiers = tuple(_int(v, "tier_sizes") for v in tiers)
    return from_json(doc["criterion"]), tiers
