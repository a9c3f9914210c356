import numpy as np
import pytest
from scipy import stats

from rerand.dgp import (
    ConditionalEllipsoidalSpec,
    EllipsoidalSpec,
    PotentialOutcomeSpec,
    attach_outcomes,
    canonical_remaining,
    outcome_moments,
    sample_conditional_ellipsoidal,
    sample_ellipsoidal,
)
from rerand.errors import InvalidData, NotPositiveDefinite


def test_normal_covariance_law_of_large_numbers():
    pop = sample_ellipsoidal(EllipsoidalSpec(np.zeros(3), np.eye(3)), 100_000, seed=1)
    assert np.max(np.abs(np.cov(pop.values, rowvar=False) - np.eye(3))) < 0.05
    assert np.max(np.abs(pop.values.mean(axis=0))) < 0.02


def test_small_sample_shape():
    pop = sample_ellipsoidal(EllipsoidalSpec([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]]), 2, seed=0)
    assert pop.values.shape == (2, 2)
    assert np.all(np.isfinite(pop.values))


def test_student_t_covariance():
    spec = EllipsoidalSpec(np.zeros(2), np.eye(2), "student_t", 5.0)
    pop = sample_ellipsoidal(spec, 200_000, seed=2)
    assert np.max(np.abs(np.cov(pop.values, rowvar=False) - 5 / 3 * np.eye(2))) < 0.05
    assert np.allclose(spec.covariance, 5 / 3 * np.eye(2))


def test_invalid_specs():
    with pytest.raises(NotPositiveDefinite):
        EllipsoidalSpec(np.zeros(2), [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(InvalidData):
        EllipsoidalSpec(np.zeros(2), np.eye(2), "student_t", 2.0)
    with pytest.raises(InvalidData):
        sample_ellipsoidal(EllipsoidalSpec(np.zeros(1), np.eye(1)), 1, 0)


def test_determinism():
    spec = EllipsoidalSpec(np.zeros(3), np.eye(3), "student_t", 7.0)
    a = sample_ellipsoidal(spec, 50, seed=9)
    b = sample_ellipsoidal(spec, 50, seed=9)
    assert np.array_equal(a.values, b.values)
    # rows are index-addressed: a longer sample extends a shorter one
    c = sample_ellipsoidal(spec, 80, seed=9)
    assert np.array_equal(c.values[:50], a.values)


def test_rotation_symmetry_of_canonical_form():
    sigma = np.array([[2.0, 0.8], [0.8, 1.0]])
    mu = np.array([1.0, -1.0])
    pop = sample_ellipsoidal(EllipsoidalSpec(mu, sigma), 40_000, seed=4)
    lf = np.linalg.cholesky(np.linalg.inv(sigma))
    z = (pop.values - mu) @ lf
    theta = 0.7
    q = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    assert stats.ks_2samp(z[:20_000, 0], (z[20_000:] @ q)[:, 0]).pvalue > 1e-3
    assert np.allclose(np.linalg.norm(z @ q, axis=1), np.linalg.norm(z, axis=1))


def test_conditional_single_level_reduces_to_ellipsoidal():
    sigma = np.array([[1.0, 0.2], [0.2, 2.0]])
    cond = ConditionalEllipsoidalSpec([1.0], [[1.0, 2.0]], sigma)
    a = sample_conditional_ellipsoidal(cond, 30, seed=5)
    b = sample_ellipsoidal(EllipsoidalSpec([1.0, 2.0], sigma), 30, seed=5)
    assert np.array_equal(a.values[:, :2], b.values)
    assert np.all(a.strata == 0)


def test_conditional_within_level_covariances():
    cond = ConditionalEllipsoidalSpec([0.5, 0.5], [[0.0, 0.0], [5.0, 5.0]], np.eye(2), levels=(1.0, 2.0))
    pop = sample_conditional_ellipsoidal(cond, 20_000, seed=6)
    assert set(np.unique(pop.values[:, 2])) == {1.0, 2.0}
    for j in range(2):
        block = pop.values[pop.strata == j, :2]
        assert np.max(np.abs(np.cov(block, rowvar=False) - np.eye(2))) < 0.1
        assert np.allclose(block.mean(axis=0), [0.0, 0.0] if j == 0 else [5.0, 5.0], atol=0.1)


def test_level_counts_binomial():
    cond = ConditionalEllipsoidalSpec([0.5, 0.5], [[0.0], [1.0]], np.eye(1))
    n = 10_000
    pop = sample_conditional_ellipsoidal(cond, n, seed=7)
    assert abs(np.sum(pop.strata == 0) - n / 2) < 3 * np.sqrt(n / 4)


def test_empty_level_flagged_not_raised():
    cond = ConditionalEllipsoidalSpec([0.998, 0.001, 0.001], [[0.0], [1.0], [2.0]], np.eye(1))
    pop = sample_conditional_ellipsoidal(cond, 6, seed=1)
    present = set(pop.strata.tolist())
    assert set(pop.empty_levels) == {0, 1, 2} - present
    assert pop.empty_levels


def test_canonical_remaining_is_spherical():
    sigma = np.array([[2.0, 0.6], [0.6, 1.0]])
    cond = ConditionalEllipsoidalSpec([0.5, 0.5], [[0.0, 0.0], [2.0, -1.0]], sigma)
    pop = sample_conditional_ellipsoidal(cond, 50_000, seed=8)
    z = canonical_remaining(pop, cond)
    assert np.max(np.abs(np.cov(z, rowvar=False) - np.eye(2))) < 0.03


def test_constant_effect_outcomes():
    pop = sample_ellipsoidal(EllipsoidalSpec(np.zeros(2), np.eye(2)), 20, seed=3)
    out = attach_outcomes(pop, PotentialOutcomeSpec([1.0, -1.0], [1.0, -1.0], a1=2.0, a0=0.0), seed=3)
    assert out.tau == pytest.approx(2.0, abs=1e-12)
    m = outcome_moments(out)
    assert m.var_tau == pytest.approx(0.0, abs=1e-20)


def test_outcome_moments_match_direct_computation():
    pop = sample_ellipsoidal(EllipsoidalSpec(np.zeros(3), np.eye(3)), 40, seed=4)
    out = attach_outcomes(pop, PotentialOutcomeSpec([1.0, 0.5, 0.0], [0.2, 0.0, -1.0], 1.0, 0.0, 0.7), seed=4)
    m = outcome_moments(out)
    assert m.var_y1 == pytest.approx(np.var(out.y1, ddof=1))
    assert m.var_y0 == pytest.approx(np.var(out.y0, ddof=1))
    full = np.cov(np.column_stack([out.y1, out.y0, out.values]), rowvar=False)
    assert np.allclose(m.cov_y1_x, full[0, 2:])
    assert np.allclose(m.cov_y0_x, full[1, 2:])
    assert m.var_tau == pytest.approx(np.var(out.y1 - out.y0, ddof=1))


def test_outcome_shape_mismatch():
    pop = sample_ellipsoidal(EllipsoidalSpec(np.zeros(2), np.eye(2)), 5, seed=0)
    with pytest.raises(InvalidData):
        attach_outcomes(pop, PotentialOutcomeSpec([1.0], [1.0]), 0)
