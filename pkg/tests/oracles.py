"""Independent reference implementations used only by the tests.

These deliberately avoid the package's kernels: explicit inverses,
least squares via lstsq, plain loops over assignments.
"""

import itertools
import math

import numpy as np


def mean_diff(x, w):
    x = np.asarray(x, float)
    w = np.asarray(w)
    return x[w == 1].mean(axis=0) - x[w == 0].mean(axis=0)


def cov(x):
    x = np.asarray(x, float)
    x = x[:, None] if x.ndim == 1 else x
    return np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])


def mahalanobis(x, w):
    x = np.asarray(x, float)
    x = x[:, None] if x.ndim == 1 else x
    n = x.shape[0]
    p = np.mean(w)
    d = mean_diff(x, w)
    return float(n * p * (1 - p) * d @ np.linalg.inv(cov(x)) @ d)


def tier_residuals(x, sizes):
    x = np.asarray(x, float)
    out = x.copy()
    start = 0
    for size in sizes:
        if start:
            design = np.column_stack([np.ones(x.shape[0]), x[:, :start]])
            beta, *_ = np.linalg.lstsq(design, x[:, start:start + size], rcond=None)
            out[:, start:start + size] = x[:, start:start + size] - design @ beta
        start += size
    return out


def tier_scores(x, sizes, w):
    e = tier_residuals(x, sizes)
    n = e.shape[0]
    p = np.mean(w)
    out = []
    start = 0
    for size in sizes:
        block = e[:, start:start + size]
        d = mean_diff(block, w)
        out.append(float(n * p * (1 - p) * d @ np.linalg.inv(cov(block)) @ d))
        start += size
    return out


def stratum_scores(x, strata, w):
    x = np.asarray(x, float)
    w = np.asarray(w)
    out = []
    for j in sorted(set(strata.tolist())):
        rows = strata == j
        out.append(mahalanobis(x[rows], w[rows]))
    return out


def per_covariate_scores(x, w):
    x = np.asarray(x, float)
    n = x.shape[0]
    p = np.mean(w)
    d = mean_diff(x, w)
    return [float(n * p * (1 - p) * d[i] ** 2 / np.var(x[:, i], ddof=1)) for i in range(x.shape[1])]


def all_assignments(n, n1):
    for treated in itertools.combinations(range(n), n1):
        w = np.zeros(n, dtype=int)
        w[list(treated)] = 1
        yield w


def stratified_assignments(strata, treated):
    groups = [np.flatnonzero(strata == j) for j in range(len(treated))]
    choices = [list(itertools.combinations(g.tolist(), t)) for g, t in zip(groups, treated)]
    for combo in itertools.product(*choices):
        w = np.zeros(strata.size, dtype=int)
        for c in combo:
            w[list(c)] = 1
        yield w


def chi2_cdf_even(k, x):
    """Closed form for even degrees of freedom: 1 - exp(-x/2) sum_{i<k/2} (x/2)^i / i!."""
    half = x / 2.0
    return 1.0 - math.exp(-half) * sum(half ** i / math.factorial(i) for i in range(k // 2))


def exact_balance(x, assignments, accept):
    """Exact accepted/all moments of the mean difference over a list of assignments."""
    diffs = np.array([mean_diff(x, w) for w in assignments])
    phi = np.array([accept(w) for w in assignments], float)
    m_acc = phi @ diffs / phi.sum()
    c = diffs - m_acc
    cov_acc = (c * phi[:, None]).T @ c / phi.sum()
    m_all = diffs.mean(axis=0)
    c_all = diffs - m_all
    return phi.mean(), m_acc, cov_acc, m_all, c_all.T @ c_all / len(diffs)
