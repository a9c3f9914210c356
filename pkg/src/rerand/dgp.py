"""Synthetic populations from (conditionally) ellipsoidal distributions.

Rows are generated from index-derived substreams (see :mod:`rerand.rng`), so
a population is a pure function of ``(spec, n, seed)`` and any subset of rows
can be regenerated independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaincinv

from . import rng
from .errors import InvalidData
from .stats import Population, cholesky, cholesky_inverse_factor


@dataclass(frozen=True)
class EllipsoidalSpec:
    """Location ``mu``, scatter ``sigma`` and a concrete radial family.

    ``family`` is ``"normal"`` or ``"student_t"`` (with ``df > 2``).  For
    the t family the covariance is ``df / (df - 2) * sigma``.
    """

    mu: np.ndarray
    sigma: np.ndarray
    family: str = "normal"
    df: float | None = None

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if sigma.shape != (mu.size, mu.size):
            raise InvalidData("sigma must be k x k for a length-k mu")
        if not np.allclose(sigma, sigma.T):
            raise InvalidData("sigma must be symmetric")
        cholesky(sigma)
        if self.family not in ("normal", "student_t"):
            raise InvalidData(f"unknown family {self.family!r}")
        if self.family == "student_t" and (self.df is None or self.df <= 2):
            raise InvalidData("student_t needs df > 2")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def k(self) -> int:
        return self.mu.size

    @property
    def covariance(self) -> np.ndarray:
        if self.family == "student_t":
            return self.sigma * self.df / (self.df - 2)
        return self.sigma


def _radial_scale(family: str, df: float | None, seed: int, rows: np.ndarray) -> np.ndarray:
    """Per-row divisor sqrt(chi2_df / df), shared across coordinates of a row."""
    if family == "normal":
        return np.ones(rows.size)
    u = rng.uniforms(seed, rng.RADIAL, rows, 1)[:, 0]
    chi2 = 2.0 * gammaincinv(df / 2.0, u)
    return np.sqrt(chi2 / df)


def _spherical(k: int, family: str, df: float | None, seed: int, rows: np.ndarray) -> np.ndarray:
    z = rng.normals(seed, rng.NORMAL, rows, k)
    return z / _radial_scale(family, df, seed, rows)[:, None]


def sample_ellipsoidal(spec: EllipsoidalSpec, n: int, seed: int, labels: Sequence[str] | None = None) -> Population:
    """Draw ``n`` i.i.d. rows ``mu + z C'`` with ``sigma = C C'`` and ``z`` spherical."""
    if n < 2:
        raise InvalidData("n must be at least 2")
    rows = np.arange(n)
    c = cholesky(spec.sigma)
    x = spec.mu + _spherical(spec.k, spec.family, spec.df, seed, rows) @ c.T
    return Population(values=x, labels=tuple(labels) if labels else tuple(f"x{i + 1}" for i in range(spec.k)))


@dataclass(frozen=True)
class ConditionalEllipsoidalSpec:
    """General location model: a categorical special covariate and an
    ellipsoidal remaining block sharing one scatter matrix across levels.

    ``levels`` are the numeric codes ``c(1)..c(J)`` written to the special
    column; ``families`` optionally gives a ``(family, df)`` pair per level.
    """

    probabilities: np.ndarray
    conditional_mu: np.ndarray
    sigma: np.ndarray
    levels: tuple[float, ...] | None = None
    families: tuple[tuple[str, float | None], ...] | None = None
    special_label: str = "s"

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.conditional_mu, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if p.ndim != 1 or np.any(p <= 0) or abs(p.sum() - 1) > 1e-12:
            raise InvalidData("level probabilities must be positive and sum to 1")
        if mu.shape[0] != p.size or sigma.shape != (mu.shape[1], mu.shape[1]):
            raise InvalidData("conditional_mu must be J x k_r and sigma k_r x k_r")
        cholesky(sigma)
        levels = tuple(float(v) for v in self.levels) if self.levels is not None else tuple(float(j) for j in range(p.size))
        if len(levels) != p.size:
            raise InvalidData("one level code per probability")
        fams = self.families or tuple(("normal", None) for _ in range(p.size))
        for fam, df in fams:
            EllipsoidalSpec(np.zeros(mu.shape[1]), sigma, fam, df)
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "conditional_mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "families", tuple(fams))

    @property
    def n_levels(self) -> int:
        return self.probabilities.size

    @property
    def k_r(self) -> int:
        return self.sigma.shape[0]


def sample_conditional_ellipsoidal(spec: ConditionalEllipsoidalSpec, n: int, seed: int) -> Population:
    """Draw a general-location population.

    Columns are the ``k_r`` remaining covariates followed by the special
    column; ``strata`` carries the level index of every row.  Levels that
    end up empty are listed in ``empty_levels`` rather than raising.
    """
    if n < 2 * spec.n_levels:
        raise InvalidData("n must be at least twice the number of levels")
    rows = np.arange(n)
    u = rng.uniforms(seed, rng.LEVEL, rows, 1)[:, 0]
    cum = np.cumsum(spec.probabilities)
    cum[-1] = 1.0
    codes = np.searchsorted(cum, u, side="right")
    c = cholesky(spec.sigma)
    z = rng.normals(seed, rng.NORMAL, rows, spec.k_r)
    scale = np.ones(n)
    for j, (fam, df) in enumerate(spec.families):
        if fam != "normal":
            mine = codes == j
            scale[mine] = _radial_scale(fam, df, seed, rows[mine])
    xr = spec.conditional_mu[codes] + (z / scale[:, None]) @ c.T
    special = np.asarray(spec.levels)[codes]
    labels = tuple(f"x{i + 1}" for i in range(spec.k_r)) + (spec.special_label,)
    empty = tuple(j for j in range(spec.n_levels) if not np.any(codes == j))
    return Population(
        values=np.column_stack([xr, special]),
        labels=labels,
        strata=codes,
        stratum_column=spec.special_label,
        stratum_levels=spec.levels,
        empty_levels=empty,
    )


def canonical_remaining(pop: Population, spec: ConditionalEllipsoidalSpec) -> np.ndarray:
    """Canonical form ``(x_r - mu_level) L`` with ``sigma^-1 = L L'``."""
    xr = pop.values[:, pop.remaining_columns()]
    return (xr - spec.conditional_mu[pop.strata]) @ cholesky_inverse_factor(spec.sigma)


@dataclass(frozen=True)
class PotentialOutcomeSpec:
    """Linear potential outcomes ``Y(w) = a_w + x beta_w + noise_sd * eps_w``."""

    beta1: np.ndarray
    beta0: np.ndarray
    a1: float = 0.0
    a0: float = 0.0
    noise_sd: float = 0.0

    def __post_init__(self):
        b1 = np.atleast_1d(np.asarray(self.beta1, dtype=np.float64))
        b0 = np.atleast_1d(np.asarray(self.beta0, dtype=np.float64))
        if b1.shape != b0.shape:
            raise InvalidData("beta1 and beta0 must have equal length")
        if self.noise_sd < 0:
            raise InvalidData("noise_sd must be non-negative")
        object.__setattr__(self, "beta1", b1)
        object.__setattr__(self, "beta0", b0)


def attach_outcomes(pop: Population, spec: PotentialOutcomeSpec, seed: int) -> Population:
    """Return ``pop`` with both potential outcomes stored per unit."""
    if spec.beta1.size != pop.k:
        raise InvalidData(f"coefficients have length {spec.beta1.size}, covariates have {pop.k}")
    eps = rng.normals(seed, rng.NOISE, np.arange(pop.n), 2)
    y1 = spec.a1 + pop.values @ spec.beta1 + spec.noise_sd * eps[:, 1]
    y0 = spec.a0 + pop.values @ spec.beta0 + spec.noise_sd * eps[:, 0]
    return replace(pop, y0=y0, y1=y1)


@dataclass
class OutcomeMoments:
    """Finite-population outcome moments (all with divisor ``n - 1``)."""

    var_y1: float
    var_y0: float
    cov_y1_x: np.ndarray
    cov_y0_x: np.ndarray
    var_tau: float
    tau: float = field(default=0.0)


def outcome_moments(pop: Population) -> OutcomeMoments:
    if pop.y0 is None or pop.y1 is None:
        raise InvalidData("population has no potential outcomes")
    n = pop.n
    xc = pop.values - pop.values.mean(axis=0)
    y1c = pop.y1 - pop.y1.mean()
    y0c = pop.y0 - pop.y0.mean()
    d = pop.y1 - pop.y0
    return OutcomeMoments(
        var_y1=float(y1c @ y1c / (n - 1)),
        var_y0=float(y0c @ y0c / (n - 1)),
        cov_y1_x=y1c @ xc / (n - 1),
        cov_y0_x=y0c @ xc / (n - 1),
        var_tau=float(np.var(d, ddof=1)),
        tau=float(d.mean()),
    )
