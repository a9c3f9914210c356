"""Randomization draws, rejection sampling and Monte Carlo balance summaries.

Draw ``i`` of a run is a pure function of ``(seed, i)``: the assignment
comes from the ``ASSIGNMENT`` substream and the acceptance coin (only used
when ``0 < phi < 1``) from ``COIN``.  Accumulation happens in fixed-size
blocks merged in block order, so reports do not depend on thread count.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng
from .criteria import Assignment, Criterion, Scorer, evaluate_batch, families_used, to_json
from .errors import AcceptanceTooRare, InvalidData, InvalidPlan, TooLarge
from .stats import Population, group_mean_diff

BLOCK = 4096
ENUMERATION_LIMIT = 1_000_000


@dataclass(frozen=True)
class RandomizationPlan:
    """Complete randomization of ``n_treated`` units, or stratified
    randomization with ``treated[j]`` treated units in stratum ``j``."""

    kind: str
    n_treated: int | None = None
    strata: np.ndarray | None = None
    treated: tuple[int, ...] | None = None

    @classmethod
    def complete(cls, n_treated: int) -> "RandomizationPlan":
        return cls("complete", n_treated=int(n_treated))

    @classmethod
    def stratified(cls, strata, treated: Sequence[int]) -> "RandomizationPlan":
        s = np.asarray(strata, dtype=np.int64)
        s.setflags(write=False)
        return cls("stratified", strata=s, treated=tuple(int(t) for t in treated))

    def validate(self, n: int) -> None:
        if self.kind == "complete":
            if self.n_treated is None or not 1 <= self.n_treated <= n - 1:
                raise InvalidPlan(f"need 1 <= n_treated <= {n - 1}, got {self.n_treated}")
            return
        if self.kind != "stratified":
            raise InvalidPlan(f"unknown plan kind {self.kind!r}")
        if self.strata is None or self.strata.shape != (n,) or self.strata.min() < 0:
            raise InvalidPlan("stratified plan needs one non-negative stratum code per unit")
        sizes = np.bincount(self.strata)
        if len(self.treated) != sizes.size:
            raise InvalidPlan(f"plan lists {len(self.treated)} strata, data has {sizes.size}")
        for j, (nj, tj) in enumerate(zip(sizes, self.treated)):
            if not 1 <= tj <= nj - 1:
                raise InvalidPlan(f"stratum {j}: need 1 <= treated <= {nj - 1}, got {tj}")

    def groups(self, n: int) -> list[tuple[np.ndarray, int]]:
        """``(unit indices, treated count)`` per randomization block."""
        if self.kind == "complete":
            return [(np.arange(n), self.n_treated)]
        return [(np.flatnonzero(self.strata == j), t) for j, t in enumerate(self.treated)]

    def count(self, n: int) -> int:
        return math.prod(math.comb(idx.size, t) for idx, t in self.groups(n))

    def to_dict(self) -> dict:
        if self.kind == "complete":
            return {"kind": "complete", "n_treated": self.n_treated}
        return {"kind": "stratified", "treated": list(self.treated)}


def plan_for(pop: Population, spec: dict) -> RandomizationPlan:
    """Build a plan from ``{"kind": "complete", "n_treated": k}`` or
    ``{"kind": "stratified", "treated": [...]}`` using the population's strata."""
    kind = spec.get("kind")
    if kind == "complete":
        n1 = spec.get("n_treated", pop.n // 2)
        if isinstance(n1, bool) or not isinstance(n1, int):
            raise InvalidPlan("n_treated must be an integer")
        plan = RandomizationPlan.complete(n1)
    elif kind == "stratified":
        if pop.strata is None:
            raise InvalidPlan("stratified plan needs a stratum column in the data")
        treated = spec.get("treated")
        if treated is None:
            treated = [int(c) // 2 for c in np.bincount(pop.strata)]
        plan = RandomizationPlan.stratified(pop.strata, treated)
    else:
        raise InvalidPlan(f"unknown plan kind {kind!r}")
    extra = set(spec) - {"kind", "n_treated", "treated"}
    if extra:
        raise InvalidPlan(f"unknown plan fields {sorted(extra)}")
    plan.validate(pop.n)
    return plan


def draw_batch(plan: RandomizationPlan, n: int, seed: int, start: int, stop: int) -> np.ndarray:
    """Assignments for draw indices ``start..stop-1`` as an int8 ``(B, n)`` matrix.

    Each row ranks i.i.d. uniforms and treats the lowest-ranked units of
    every block, which is uniform over the constrained assignment set.
    """
    u = rng.uniforms(seed, rng.ASSIGNMENT, np.arange(start, stop), n)
    w = np.zeros((stop - start, n), dtype=np.int8)
    rows = np.arange(stop - start)[:, None]
    for idx, t in plan.groups(n):
        sub = u[:, idx]
        pick = np.argpartition(sub, t - 1, axis=1)[:, :t]
        w[rows, idx[pick]] = 1
    return w


def draw_assignment(plan: RandomizationPlan, n: int, seed: int, index: int) -> Assignment:
    plan.validate(n)
    return Assignment(draw_batch(plan, n, seed, index, index + 1)[0])


def _coins(seed: int, start: int, stop: int) -> np.ndarray:
    return rng.uniforms(seed, rng.COIN, np.arange(start, stop), 1)[:, 0]


def _accept(phi: np.ndarray, seed: int, start: int) -> np.ndarray:
    """Coin flips; draws with phi in {0, 1} never look at the coin stream."""
    out = phi >= 1.0
    partial = (phi > 0) & (phi < 1)
    if np.any(partial):
        out = out | (partial & (_coins(seed, start, start + phi.size) < phi))
    return out


def rerandomize(
    pop: Population,
    plan: RandomizationPlan,
    spec: Criterion,
    seed: int,
    max_draws: int = 1_000_000,
    batch: int = 256,
) -> tuple[Assignment, int]:
    """Draw assignments in index order until one is accepted.

    Returns the accepted assignment and the number of draws used.
    """
    plan.validate(pop.n)
    if max_draws < 1:
        raise InvalidData("max_draws must be >= 1")
    scorer = Scorer(pop)
    total_phi = 0.0
    start = 0
    while start < max_draws:
        stop = min(max_draws, start + batch)
        w = draw_batch(plan, pop.n, seed, start, stop)
        phi = evaluate_batch(spec, scorer, w)
        hits = np.flatnonzero(_accept(phi, seed, start))
        if hits.size:
            i = int(hits[0])
            return Assignment(w[i]), start + i + 1
        total_phi += float(phi.sum())
        start = stop
        batch = min(batch * 2, BLOCK)
    raise AcceptanceTooRare(
        f"no assignment accepted in {max_draws} draws",
        observed_rate=total_phi / max_draws,
        draws=max_draws,
    )


# ---------------------------------------------------------------------------
# weighted moment accumulation
# ---------------------------------------------------------------------------


@dataclass
class _Moments:
    """Weighted first and second moments of row vectors, mergeable by Chan's rule."""

    dim: int
    weight: float = 0.0
    weight_sq: float = 0.0
    mean: np.ndarray = None
    m2: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
            self.m2 = np.zeros((self.dim, self.dim))

    @classmethod
    def of(cls, values: np.ndarray, weights: np.ndarray) -> "_Moments":
        out = cls(values.shape[1])
        w = float(weights.sum())
        if w > 0:
            mean = weights @ values / w
            c = values - mean
            out.weight, out.weight_sq = w, float(weights @ weights)
            out.mean, out.m2 = mean, (c * weights[:, None]).T @ c
        return out

    def merge(self, other: "_Moments") -> None:
        if other.weight == 0:
            return
        if self.weight == 0:
            self.weight, self.weight_sq = other.weight, other.weight_sq
            self.mean, self.m2 = other.mean.copy(), other.m2.copy()
            return
        total = self.weight + other.weight
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.weight * other.weight / total)
        self.mean = self.mean + delta * (other.weight / total)
        self.weight = total
        self.weight_sq += other.weight_sq

    @property
    def cov(self) -> np.ndarray:
        if self.weight == 0:
            return np.full((self.dim, self.dim), np.nan)
        c = self.m2 / self.weight
        return (c + c.T) / 2

    @property
    def n_eff(self) -> float:
        return self.weight ** 2 / self.weight_sq if self.weight_sq > 0 else 0.0


@dataclass
class _Block:
    draws: int
    phi_sum: float
    phi_sq: float
    acc: _Moments
    all: _Moments
    acc_scores: _Moments
    all_scores: _Moments


@dataclass
class BalanceReport:
    """Balance of tracked mean differences over all and accepted draws.

    ``accepted`` is the total acceptance weight: the accepted count for
    deterministic criteria, ``sum(phi)`` otherwise.  Accepted moments are
    phi-weighted; covariances use the total weight as divisor.
    """

    draws: int
    accepted: float
    acceptance_rate: float
    acceptance_rate_se: float
    labels: tuple[str, ...]
    mean_diff: np.ndarray
    cov_diff: np.ndarray
    mean_diff_all: np.ndarray
    cov_diff_all: np.ndarray
    mean_diff_se: np.ndarray
    cov_diff_se: np.ndarray
    score_labels: tuple[str, ...]
    mean_scores: np.ndarray
    mean_scores_se: np.ndarray
    mean_scores_all: np.ndarray
    priv: np.ndarray
    method: str
    seed: int | None = None
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def arr(a):
            return np.asarray(a).tolist()

        return {
            "method": self.method,
            "seed": self.seed,
            "settings": self.settings,
            "draws": self.draws,
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "acceptance_rate_se": self.acceptance_rate_se,
            "labels": list(self.labels),
            "mean_diff": arr(self.mean_diff),
            "mean_diff_se": arr(self.mean_diff_se),
            "cov_diff": arr(self.cov_diff),
            "cov_diff_se": arr(self.cov_diff_se),
            "mean_diff_all": arr(self.mean_diff_all),
            "cov_diff_all": arr(self.cov_diff_all),
            "priv": arr(self.priv),
            "score_labels": list(self.score_labels),
            "mean_scores": arr(self.mean_scores),
            "mean_scores_se": arr(self.mean_scores_se),
            "mean_scores_all": arr(self.mean_scores_all),
        }


def _tracked(pop: Population, track) -> tuple[np.ndarray, tuple[str, ...]]:
    if track is None:
        return pop.values, pop.labels
    t = np.asarray(track, dtype=np.float64)
    t = t[:, None] if t.ndim == 1 else t
    if t.shape[0] != pop.n:
        raise InvalidData("tracked matrix needs one row per unit")
    return t, tuple(f"t{i}" for i in range(t.shape[1]))


def _score_matrix(scorer: Scorer, families: list[str], w: np.ndarray) -> np.ndarray:
    if not families:
        return np.zeros((w.shape[0], 0))
    return np.column_stack([scorer.scores(f, w) for f in families])


def _block_summary(scorer, spec, families, plan, tracked, seed, start, stop, coin_flip) -> _Block:
    w = draw_batch(plan, scorer.pop.n, seed, start, stop)
    phi = evaluate_batch(spec, scorer, w)
    weights = _accept(phi, seed, start).astype(np.float64) if coin_flip else phi
    d = group_mean_diff(tracked, w)
    h = _score_matrix(scorer, families, w)
    ones = np.ones(stop - start)
    return _Block(
        draws=stop - start,
        phi_sum=float(weights.sum()),
        phi_sq=float(weights @ weights),
        acc=_Moments.of(d, weights),
        all=_Moments.of(d, ones),
        acc_scores=_Moments.of(h, weights),
        all_scores=_Moments.of(h, ones),
    )


def _report(blocks, labels, score_labels, method, seed, settings, exact: bool) -> BalanceReport:
    first = blocks[0]
    acc, alld = _Moments(first.acc.dim), _Moments(first.all.dim)
    acc_s, all_s = _Moments(first.acc_scores.dim), _Moments(first.all_scores.dim)
    draws, phi_sum, phi_sq = 0, 0.0, 0.0
    for b in blocks:
        draws += b.draws
        phi_sum += b.phi_sum
        phi_sq += b.phi_sq
        acc.merge(b.acc)
        alld.merge(b.all)
        acc_s.merge(b.acc_scores)
        all_s.merge(b.all_scores)
    if phi_sum <= 0:
        raise AcceptanceTooRare("zero total acceptance weight", observed_rate=0.0, draws=draws)
    rate = phi_sum / draws
    cov = acc.cov
    var_all = np.diag(alld.cov)
    with np.errstate(divide="ignore", invalid="ignore"):
        priv = np.where(var_all > 0, 1.0 - np.diag(cov) / var_all, 0.0)
    if exact:
        rate_se = 0.0
        mean_se = np.zeros(acc.dim)
        cov_se = np.zeros((acc.dim, acc.dim))
        score_se = np.zeros(acc_s.dim)
    else:
        rate_se = math.sqrt(max(0.0, phi_sq / draws - rate * rate) / draws)
        neff = acc.n_eff
        dg = np.diag(cov)
        mean_se = np.sqrt(dg / neff)
        cov_se = np.sqrt((np.outer(dg, dg) + cov ** 2) / neff)
        score_se = np.sqrt(np.diag(acc_s.cov) / neff) if acc_s.dim else np.zeros(0)
    return BalanceReport(
        draws=draws,
        accepted=phi_sum,
        acceptance_rate=rate,
        acceptance_rate_se=rate_se,
        labels=labels,
        mean_diff=acc.mean,
        cov_diff=cov,
        mean_diff_all=alld.mean,
        cov_diff_all=alld.cov,
        mean_diff_se=mean_se,
        cov_diff_se=cov_se,
        score_labels=score_labels,
        mean_scores=acc_s.mean,
        mean_scores_se=score_se,
        mean_scores_all=all_s.mean,
        priv=priv,
        method=method,
        seed=seed,
        settings=settings,
    )


def _score_labels(scorer: Scorer, families: list[str]) -> tuple[str, ...]:
    return tuple(lab for f in families for lab in scorer.labels(f))


def monte_carlo_balance(
    pop: Population,
    plan: RandomizationPlan,
    spec: Criterion,
    n_draws: int,
    seed: int,
    threads: int = 1,
    coin_flip: bool = False,
    track=None,
    block: int = BLOCK,
) -> BalanceReport:
    """Monte Carlo balance report over ``n_draws`` randomized assignments.

    Accepted-draw averages are phi-weighted (no coin flips) unless
    ``coin_flip`` is set.  ``track`` replaces the covariates as the matrix
    whose group mean differences are summarized.
    """
    if n_draws < 1:
        raise InvalidData("n_draws must be >= 1")
    plan.validate(pop.n)
    scorer = Scorer(pop)
    families = families_used(spec)
    tracked, labels = _tracked(pop, track)
    score_labels = _score_labels(scorer, families)
    bounds = [(a, min(n_draws, a + block)) for a in range(0, n_draws, block)]

    def run(b):
        return _block_summary(scorer, spec, families, plan, tracked, seed, b[0], b[1], coin_flip)

    if threads > 1 and len(bounds) > 1:
        for fam in families:
            scorer._get(fam)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            blocks = list(ex.map(run, bounds))
    else:
        blocks = [run(b) for b in bounds]
    settings = {
        "n_draws": n_draws,
        "coin_flip": coin_flip,
        "block": block,
        "plan": plan.to_dict(),
        "criterion": to_json(spec),
    }
    return _report(blocks, labels, score_labels, "monte_carlo", seed, settings, exact=False)


def _all_assignments(plan: RandomizationPlan, n: int):
    per_group = [[idx[list(c)] for c in itertools.combinations(range(idx.size), t)] for idx, t in plan.groups(n)]
    for combo in itertools.product(*per_group):
        w = np.zeros(n, dtype=np.int8)
        for chosen in combo:
            w[chosen] = 1
        yield w


def enumerate_assignments(
    pop: Population,
    plan: RandomizationPlan,
    spec: Criterion,
    track=None,
    limit: int = ENUMERATION_LIMIT,
) -> BalanceReport:
    """Exact report: every assignment in the plan's support, equally weighted."""
    plan.validate(pop.n)
    total = plan.count(pop.n)
    if total > limit:
        raise TooLarge(f"{total} assignments exceed the enumeration limit {limit}", count=total)
    scorer = Scorer(pop)
    families = families_used(spec)
    tracked, labels = _tracked(pop, track)
    blocks = []
    gen = _all_assignments(plan, pop.n)
    while True:
        chunk = list(itertools.islice(gen, BLOCK))
        if not chunk:
            break
        w = np.stack(chunk)
        phi = evaluate_batch(spec, scorer, w)
        d = group_mean_diff(tracked, w)
        h = _score_matrix(scorer, families, w)
        ones = np.ones(w.shape[0])
        blocks.append(_Block(w.shape[0], float(phi.sum()), float(phi @ phi), _Moments.of(d, phi),
                             _Moments.of(d, ones), _Moments.of(h, phi), _Moments.of(h, ones)))
    settings = {"plan": plan.to_dict(), "criterion": to_json(spec)}
    return _report(blocks, labels, _score_labels(scorer, families), "exact", None, settings, exact=True)


def collect(
    pop: Population,
    plan: RandomizationPlan,
    spec: Criterion,
    n_draws: int,
    seed: int,
    track=None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-draw ``(phi, tracked mean differences, scores)`` for custom summaries."""
    plan.validate(pop.n)
    scorer = Scorer(pop)
    families = families_used(spec)
    tracked, _ = _tracked(pop, track)
    phis, diffs, scores = [], [], []
    for a in range(0, n_draws, BLOCK):
        b = min(n_draws, a + BLOCK)
        w = draw_batch(plan, pop.n, seed, a, b)
        phis.append(evaluate_batch(spec, scorer, w))
        diffs.append(group_mean_diff(tracked, w))
        scores.append(_score_matrix(scorer, families, w))
    return np.concatenate(phis), np.concatenate(diffs), np.concatenate(scores)
