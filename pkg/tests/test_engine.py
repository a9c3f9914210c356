from collections import Counter

import numpy as np
import pytest

import oracles
from rerand.criteria import (
    Intersection,
    MahalanobisThreshold,
    Stochastic,
    Stratification,
    StratumScoreThreshold,
    TierScoreThreshold,
    WeightedSumThreshold,
)
from rerand.engine import (
    RandomizationPlan,
    collect,
    draw_assignment,
    draw_batch,
    enumerate_assignments,
    monte_carlo_balance,
    plan_for,
    rerandomize,
)
from rerand.errors import AcceptanceTooRare, InvalidCriterion, InvalidPlan, TooLarge
from rerand.stats import Population

X4 = Population(np.array([[1.0], [2.0], [3.0], [4.0]]), ("x",))


def test_plan_validation():
    with pytest.raises(InvalidPlan):
        RandomizationPlan.complete(0).validate(4)
    with pytest.raises(InvalidPlan):
        RandomizationPlan.complete(4).validate(4)
    with pytest.raises(InvalidPlan):
        RandomizationPlan.stratified([0, 0, 1, 1], (1, 2)).validate(4)
    with pytest.raises(InvalidPlan):
        RandomizationPlan.stratified([0, 0, 1, 1], (1,)).validate(4)
    with pytest.raises(InvalidPlan):
        draw_assignment(RandomizationPlan.complete(5), 4, 0, 0)
    assert RandomizationPlan.stratified([0, 0, 0, 0, 1, 1, 1, 1], (2, 2)).count(8) == 36


def test_plan_for_defaults_and_unknown_fields():
    pop = Population(np.arange(12.0).reshape(6, 2), ("a", "b"), strata=np.array([0, 0, 0, 1, 1, 1]))
    assert plan_for(pop, {"kind": "complete"}).n_treated == 3
    assert plan_for(pop, {"kind": "stratified"}).treated == (1, 1)
    with pytest.raises(InvalidPlan):
        plan_for(pop, {"kind": "complete", "n1": 2})
    with pytest.raises(InvalidPlan):
        plan_for(X4, {"kind": "stratified"})


def test_two_point_uniform():
    w = draw_batch(RandomizationPlan.complete(1), 2, 0, 0, 100_000)
    freq = w[:, 0].mean()
    assert abs(freq - 0.5) < 3 * np.sqrt(0.25 / 100_000)


def test_n4_support_uniform():
    w = draw_batch(RandomizationPlan.complete(2), 4, 1, 0, 60_000)
    assert np.all(w.sum(axis=1) == 2)
    counts = Counter(map(tuple, w.tolist()))
    assert len(counts) == 6
    se = np.sqrt(1 / 6 * 5 / 6 / 60_000)
    for c in counts.values():
        assert abs(c / 60_000 - 1 / 6) < 4 * se


def test_stratified_product_space():
    plan = RandomizationPlan.stratified([0, 0, 1, 1], (1, 1))
    w = draw_batch(plan, 4, 2, 0, 40_000)
    assert np.all(w[:, :2].sum(axis=1) == 1) and np.all(w[:, 2:].sum(axis=1) == 1)
    counts = Counter(map(tuple, w.tolist()))
    assert len(counts) == 4
    for c in counts.values():
        assert abs(c / 40_000 - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 40_000)


def test_draws_deterministic_in_seed_and_index():
    plan = RandomizationPlan.complete(5)
    batch = draw_batch(plan, 10, 7, 0, 50)
    assert np.array_equal(draw_assignment(plan, 10, 7, 31).w, batch[31])
    assert not np.array_equal(draw_batch(plan, 10, 8, 0, 50), batch)


def test_rerandomize_always_accept():
    a, used = rerandomize(X4, RandomizationPlan.complete(2), Stochastic(1.0), seed=3)
    assert used == 1
    assert np.array_equal(a.w, draw_assignment(RandomizationPlan.complete(2), 4, 3, 0).w)


def test_rerandomize_geometric_draws():
    # D = 0 accepts the two mirror assignments (1,0,0,1) and (0,1,1,0)
    spec = MahalanobisThreshold(1e-9)
    used = [rerandomize(X4, RandomizationPlan.complete(2), spec, seed=s)[1] for s in range(3000)]
    assert abs(np.mean(used) - 3.0) < 3 * np.sqrt(6 / 3000)
    # both treated units in the {0, 3} block accepts exactly one of the six
    pop = Population(X4.values, ("x",), strata=np.array([0, 1, 1, 0]))
    spec = Stratification((2, 0))
    accepted = [w for w in oracles.all_assignments(4, 2) if w[0] == w[3] == 1]
    assert len(accepted) == 1
    runs = [rerandomize(pop, RandomizationPlan.complete(2), spec, seed=s) for s in range(3000)]
    assert all(a.w.tolist() == [1, 0, 0, 1] for a, _ in runs)
    used = [u for _, u in runs]
    assert abs(np.mean(used) - 6.0) < 3 * np.sqrt(30 / 3000)


def test_rerandomize_exhaustion():
    x = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 1.0], [4.0, 0.0]])
    pop = Population(x, ("a", "b"))
    with pytest.raises(AcceptanceTooRare) as err:
        rerandomize(pop, RandomizationPlan.complete(2), Intersection((MahalanobisThreshold(-1.0),)), 0, max_draws=50)
    assert err.value.details["observed_rate"] == 0.0
    with pytest.raises(InvalidCriterion):
        rerandomize(pop, RandomizationPlan.complete(2), Stochastic(0.0), 0)


def test_always_accept_report_matches_all_draws():
    rng = np.random.default_rng(0)
    pop = Population(rng.normal(size=(12, 2)), ("a", "b"))
    r = monte_carlo_balance(pop, RandomizationPlan.complete(6), Stochastic(1.0), 5000, seed=1)
    assert np.array_equal(r.mean_diff, r.mean_diff_all)
    assert np.allclose(r.cov_diff, r.cov_diff_all, rtol=0, atol=1e-15)
    assert r.acceptance_rate == 1.0


def test_enumeration_n4_matches_oracle():
    spec = MahalanobisThreshold(0.6 + 1e-9)
    r = enumerate_assignments(X4, RandomizationPlan.complete(2), spec)
    ws = list(oracles.all_assignments(4, 2))
    rate, m_acc, c_acc, m_all, c_all = oracles.exact_balance(X4.values, ws, lambda w: oracles.mahalanobis(X4.values, w) <= 0.6 + 1e-9)
    assert r.draws == 6
    assert r.acceptance_rate == pytest.approx(rate) == pytest.approx(4 / 6)
    assert r.mean_diff == pytest.approx(m_acc, abs=1e-12)
    assert r.cov_diff == pytest.approx(c_acc)
    assert r.cov_diff_all == pytest.approx(c_all)
    # mean difference over the accepted set {0, +-1} is 0, variance 1/2
    assert r.cov_diff[0, 0] == pytest.approx(0.5)
    assert r.mean_scores == pytest.approx([0.3])


def test_enumeration_counts_and_limit():
    pop = Population(np.arange(8.0)[:, None], ("x",), strata=np.repeat([0, 1], 4))
    plan = RandomizationPlan.stratified(pop.strata, (2, 2))
    assert enumerate_assignments(pop, plan, Stochastic(1.0)).draws == 36
    with pytest.raises(TooLarge):
        enumerate_assignments(Population(np.arange(40.0)[:, None], ("x",)), RandomizationPlan.complete(20), Stochastic(1.0))


def test_mc_matches_exact_acceptance():
    rng = np.random.default_rng(2)
    pop = Population(rng.normal(size=(10, 2)), ("a", "b"))
    plan = RandomizationPlan.complete(5)
    spec = MahalanobisThreshold(1.0)
    exact = enumerate_assignments(pop, plan, spec)
    mc = monte_carlo_balance(pop, plan, spec, 50_000, seed=3)
    assert abs(mc.acceptance_rate - exact.acceptance_rate) < 3 * np.sqrt(exact.acceptance_rate * (1 - exact.acceptance_rate) / 50_000)
    assert np.all(np.abs(mc.mean_diff - exact.mean_diff) < 4 * mc.mean_diff_se)


def test_mean_preservation_exact():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(10, 3))
    specs = [
        MahalanobisThreshold(1.5),
        Intersection((TierScoreThreshold(0, 1.0), TierScoreThreshold(1, 2.0))),
        WeightedSumThreshold((1.0, 0.5), 2.0, 0.5),
        Stochastic(0.3),
    ]
    pop = Population(x, ("a", "b", "c"), tier_sizes=(1, 2))
    for spec in specs:
        r = enumerate_assignments(pop, RandomizationPlan.complete(5), spec)
        assert np.max(np.abs(r.mean_diff)) < 1e-12


def test_weighted_and_coin_flip_estimates_agree():
    rng = np.random.default_rng(5)
    pop = Population(rng.normal(size=(20, 2)), ("a", "b"), tier_sizes=(1, 1))
    spec = WeightedSumThreshold((1.0, 0.5), 1.5, 1.0)
    spec = Intersection((spec, Stochastic(0.6)))
    plan = RandomizationPlan.complete(10)
    rb = monte_carlo_balance(pop, plan, spec, 200_000, seed=6)
    cf = monte_carlo_balance(pop, plan, spec, 200_000, seed=6, coin_flip=True)
    for j in range(2):
        se = np.hypot(rb.mean_scores_se[j], cf.mean_scores_se[j])
        assert abs(rb.mean_scores[j] - cf.mean_scores[j]) < 3 * se
    assert rb.mean_scores_se[0] <= cf.mean_scores_se[0] * 1.05


def test_report_is_thread_invariant():
    rng = np.random.default_rng(7)
    pop = Population(rng.normal(size=(30, 3)), ("a", "b", "c"))
    plan = RandomizationPlan.complete(15)
    spec = MahalanobisThreshold(2.0)
    a = monte_carlo_balance(pop, plan, spec, 20_000, seed=9, threads=1, block=1000)
    b = monte_carlo_balance(pop, plan, spec, 20_000, seed=9, threads=4, block=1000)
    assert a.to_dict() == b.to_dict()
    assert a.accepted <= a.draws
    assert np.all(np.linalg.eigvalsh(a.cov_diff) >= -1e-15)


def test_stratified_monte_carlo_and_collect():
    rng = np.random.default_rng(8)
    x = np.column_stack([rng.normal(size=16), np.repeat([0.0, 1.0], 8)])
    pop = Population(x, ("a", "s"), strata=np.repeat([0, 1], 8), stratum_column="s")
    plan = RandomizationPlan.stratified(pop.strata, (4, 4))
    spec = Intersection((StratumScoreThreshold(0, 1.0), StratumScoreThreshold(1, 1.0)))
    r = monte_carlo_balance(pop, plan, spec, 4000, seed=1)
    phi, d, h = collect(pop, plan, spec, 4000, seed=1)
    assert phi.mean() == pytest.approx(r.acceptance_rate)
    assert r.score_labels == ("stratum:0", "stratum:1")
    assert np.all(h[phi == 1] <= 1.0)
    assert np.allclose(phi @ d / phi.sum(), r.mean_diff)
