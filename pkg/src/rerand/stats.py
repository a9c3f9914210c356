"""Deterministic matrix statistics for covariate balance.

Sample moments, a pivot-checked Cholesky kernel, Mahalanobis distances
between treatment and control means, and block-wise Gram-Schmidt
orthogonalization of tiered covariates.  Every function here is pure.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    CollinearTiers,
    InvalidData,
    IOFailure,
    NotPositiveDefinite,
    SingularCovariance,
)

PIVOT_RTOL = 1e-10


@dataclass(frozen=True)
class Population:
    """Covariates of ``n`` experimental units plus their design annotations.

    ``values`` holds one row per unit.  ``tier_sizes`` partitions the columns
    (in order) into importance tiers.  ``strata`` holds integer stratum codes
    ``0..J-1`` and ``stratum_column`` names the covariate they came from; that
    column is excluded from stratum-specific scores.  ``y0``/``y1`` are
    optional potential outcomes.
    """

    values: np.ndarray
    labels: tuple[str, ...]
    tier_sizes: tuple[int, ...] | None = None
    strata: np.ndarray | None = None
    stratum_column: str | None = None
    stratum_levels: tuple[float, ...] | None = None
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    empty_levels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        x = np.array(self.values, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise InvalidData("covariates must be a 2-d matrix")
        if x.shape[0] < 2 or x.shape[1] < 1:
            raise InvalidData(f"need n >= 2 and k >= 1, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidData("covariates contain non-finite entries")
        x.setflags(write=False)
        object.__setattr__(self, "values", x)
        labels = tuple(self.labels) if self.labels else tuple(f"x{i}" for i in range(x.shape[1]))
        if len(labels) != x.shape[1]:
            raise InvalidData("one label per column required")
        object.__setattr__(self, "labels", labels)
        if self.tier_sizes is not None:
            sizes = tuple(int(s) for s in self.tier_sizes)
            if not sizes or min(sizes) < 1 or sum(sizes) != x.shape[1]:
                raise InvalidData(f"tier sizes {sizes} do not partition {x.shape[1]} columns")
            object.__setattr__(self, "tier_sizes", sizes)
        if self.strata is not None:
            s = np.asarray(self.strata, dtype=np.int64)
            if s.shape != (x.shape[0],) or s.min() < 0:
                raise InvalidData("strata must be non-negative integer codes, one per unit")
            s.setflags(write=False)
            object.__setattr__(self, "strata", s)
        for name in ("y0", "y1"):
            y = getattr(self, name)
            if y is not None:
                y = np.asarray(y, dtype=np.float64)
                if y.shape != (x.shape[0],):
                    raise InvalidData(f"{name} must have one entry per unit")
                object.__setattr__(self, name, y)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def n_strata(self) -> int:
        return 0 if self.strata is None else int(self.strata.max()) + 1

    @property
    def tau(self) -> float | None:
        """Average treatment effect, when potential outcomes are attached."""
        if self.y0 is None or self.y1 is None:
            return None
        return float(np.mean(self.y1 - self.y0))

    def remaining_columns(self) -> list[int]:
        """Columns other than the stratification column."""
        return [i for i, lab in enumerate(self.labels) if lab != self.stratum_column]

    def select(self, columns: Sequence[str], tier_sizes: Sequence[int] | None = None) -> "Population":
        """Reorder/subset columns by label, optionally attaching a new tier partition."""
        idx = [self.labels.index(c) for c in columns]
        return replace(
            self,
            values=self.values[:, idx],
            labels=tuple(columns),
            tier_sizes=None if tier_sizes is None else tuple(tier_sizes),
        )

    def with_values(self, values: np.ndarray) -> "Population":
        return replace(self, values=values)


# ---------------------------------------------------------------------------
# moments and factorizations
# ---------------------------------------------------------------------------


def _matrix(x) -> np.ndarray:
    if isinstance(x, Population):
        return x.values
    a = np.asarray(x, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def sample_covariance(x) -> np.ndarray:
    """Sample covariance with divisor ``n - 1``."""
    a = _matrix(x)
    if a.shape[0] < 2:
        raise InvalidData("sample covariance needs at least two rows")
    if not np.all(np.isfinite(a)):
        raise InvalidData("non-finite covariate values")
    c = a - a.mean(axis=0)
    s = c.T @ c / (a.shape[0] - 1)
    return (s + s.T) / 2


def covariance_rank(s: np.ndarray, rtol: float = 1e-10) -> int:
    """Numerical rank of a covariance matrix (eigenvalues above ``rtol`` x largest)."""
    ev = np.linalg.eigvalsh(np.atleast_2d(s))
    top = ev.max(initial=0.0)
    if top <= 0:
        return 0
    return int(np.sum(ev > rtol * top))


def cholesky(s: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor ``C`` with ``s = C C'``.

    Raises NotPositiveDefinite when the smallest pivot falls below
    ``PIVOT_RTOL`` times the largest diagonal entry of ``s``.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if s.shape[0] != s.shape[1]:
        raise InvalidData("matrix must be square")
    if not np.all(np.isfinite(s)):
        raise InvalidData("non-finite matrix entries")
    scale = float(np.max(np.diag(s), initial=0.0))
    if scale <= 0:
        raise NotPositiveDefinite("matrix has no positive diagonal entry")
    try:
        c = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("Cholesky factorization failed") from exc
    pivots = np.diag(c) ** 2
    if pivots.min() < PIVOT_RTOL * scale:
        raise NotPositiveDefinite(
            "matrix is numerically singular",
            min_pivot=float(pivots.min()),
            max_diagonal=scale,
        )
    return c


def cholesky_inverse_factor(s: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``inv(s) = L L'``.

    Uses the reversal identity: if ``P s P = G G'`` with ``P`` the exchange
    matrix, then ``L = P inv(G)' P`` is lower triangular.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    g = cholesky(s[::-1, ::-1])
    ginv = solve_triangular(g, np.eye(g.shape[0]), lower=True)
    return ginv.T[::-1, ::-1].copy()


def _inverse_factor_or_singular(s: np.ndarray, what: str) -> np.ndarray:
    try:
        return cholesky_inverse_factor(s)
    except NotPositiveDefinite as exc:
        raise SingularCovariance(
            f"{what} covariance is singular; drop to a basis of covariates",
            rank=covariance_rank(s),
        ) from exc


# ---------------------------------------------------------------------------
# treatment/control comparisons
# ---------------------------------------------------------------------------


def _weights(w) -> np.ndarray:
    a = np.asarray(w, dtype=np.float64)
    if a.ndim not in (1, 2):
        raise InvalidData("assignment must be a vector or a batch of vectors")
    return a


def group_mean_diff(x, w) -> np.ndarray:
    """Treated mean minus control mean, for one assignment or a batch.

    ``w`` of shape ``(n,)`` yields a length-``k`` vector; ``(B, n)`` yields
    ``(B, k)``.
    """
    a = _matrix(x)
    wv = _weights(w)
    n1 = wv.sum(axis=-1, keepdims=True)
    n0 = a.shape[0] - n1
    if np.any(n1 < 1) or np.any(n0 < 1):
        raise InvalidData("both groups must be non-empty")
    total = a.sum(axis=0)
    treated = wv @ a
    return treated / n1 - (total - treated) / n0


def mahalanobis(x, w, inverse_factor: np.ndarray | None = None):
    """Squared Mahalanobis distance ``n p (1-p) d S^-1 d'`` between group means.

    Returns a float for a single assignment, an array for a batch.  Pass a
    precomputed ``inverse_factor`` (``L`` with ``S^-1 = L L'``) to skip the
    factorization.
    """
    a = _matrix(x)
    wv = _weights(w)
    if inverse_factor is None:
        inverse_factor = _inverse_factor_or_singular(sample_covariance(a), "covariate")
    d = group_mean_diff(a, wv)
    n = a.shape[0]
    p = wv.sum(axis=-1) / n
    q = np.sum((d @ inverse_factor) ** 2, axis=-1)
    out = n * p * (1 - p) * q
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# tiers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionRecord:
    """Regression of each tier on an intercept plus all earlier tiers.

    ``intercepts[t]`` has length ``k_t``; ``coefficients[t]`` is
    ``(k_1 + ... + k_{t-1}) x k_t`` (empty for the first tier).
    """

    tier_sizes: tuple[int, ...]
    intercepts: tuple[np.ndarray, ...]
    coefficients: tuple[np.ndarray, ...]

    def apply(self, x) -> np.ndarray:
        """Residualize new rows with the stored coefficients."""
        a = _matrix(x)
        out = np.empty_like(a)
        start = 0
        for t, size in enumerate(self.tier_sizes):
            block = a[:, start:start + size]
            out[:, start:start + size] = block - self.intercepts[t] - a[:, :start] @ self.coefficients[t]
            start += size
        return out


def tier_bounds(tier_sizes: Sequence[int]) -> list[tuple[int, int]]:
    edges = np.concatenate([[0], np.cumsum(tier_sizes)]).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def block_orthogonalize(x, tier_sizes: Sequence[int]) -> tuple[np.ndarray, ProjectionRecord]:
    """Block-wise Gram-Schmidt: residualize tier t on (1, tiers < t).

    The first tier is returned unchanged.  Least squares is solved by normal
    equations on centered data, factorized with :func:`cholesky`; a
    numerically singular regressor block raises CollinearTiers.
    """
    a = _matrix(x)
    sizes = tuple(int(s) for s in tier_sizes)
    if not sizes or min(sizes) < 1 or sum(sizes) != a.shape[1]:
        raise InvalidData(f"tier sizes {sizes} do not partition {a.shape[1]} columns")
    mean = a.mean(axis=0)
    centered = a - mean
    e = a.copy()
    intercepts: list[np.ndarray] = []
    coefs: list[np.ndarray] = []
    for t, (lo, hi) in enumerate(tier_bounds(sizes)):
        if t == 0:
            intercepts.append(np.zeros(hi - lo))
            coefs.append(np.zeros((0, hi - lo)))
            continue
        r = centered[:, :lo]
        gram = r.T @ r
        try:
            c = cholesky(gram)
        except NotPositiveDefinite as exc:
            raise CollinearTiers(f"regressors for tier {t} are collinear", tier=t) from exc
        rhs = r.T @ centered[:, lo:hi]
        beta = solve_triangular(c.T, solve_triangular(c, rhs, lower=True), lower=False)
        e[:, lo:hi] = centered[:, lo:hi] - r @ beta
        intercepts.append(mean[lo:hi] - mean[:lo] @ beta)
        coefs.append(beta)
    return e, ProjectionRecord(sizes, tuple(intercepts), tuple(coefs))


def stratum_mean_diffs(x, strata: np.ndarray, w) -> np.ndarray:
    """Within-stratum treated-minus-control mean differences.

    Returns ``(J, k)`` for one assignment or ``(B, J, k)`` for a batch.
    """
    a = _matrix(x)
    wv = _weights(w)
    strata = np.asarray(strata)
    n_strata = int(strata.max()) + 1
    out = []
    for j in range(n_strata):
        rows = strata == j
        out.append(group_mean_diff(a[rows], wv[..., rows]))
    return np.stack(out, axis=-2)


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------


def read_csv_matrix(path) -> tuple[tuple[str, ...], np.ndarray]:
    """Read a header-labelled numeric CSV (UTF-8, '.' decimals)."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [row for row in reader if row]
    except (OSError, StopIteration, UnicodeDecodeError) as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    try:
        values = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise InvalidData(f"{path}: non-numeric entry ({exc})") from exc
    if values.ndim != 2 or values.shape[1] != len(header):
        raise InvalidData(f"{path}: ragged rows")
    return tuple(h.strip() for h in header), values


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def load_population(path, columns: Sequence[str] | None = None) -> Population:
    """Load a covariate CSV and, when present, its JSON role sidecar.

    The sidecar may declare ``covariates`` (ordered column list),
    ``tier_sizes``, ``stratum_column`` and ``outcomes`` (``{"y0": col,
    "y1": col}``).  Columns not listed as covariates are ignored.
    """
    header, data = read_csv_matrix(path)
    roles = {}
    side = sidecar_path(path)
    if side.exists():
        try:
            roles = json.loads(side.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise IOFailure(f"cannot read sidecar {side}: {exc}") from exc
    outcomes = roles.get("outcomes") or {}
    covs = list(columns or roles.get("covariates") or [h for h in header if h not in outcomes.values()])
    missing = [c for c in covs if c not in header]
    if missing:
        raise InvalidData(f"columns not in CSV: {missing}")
    x = data[:, [header.index(c) for c in covs]]
    strata = levels = None
    scol = roles.get("stratum_column")
    if scol is not None:
        raw = data[:, header.index(scol)]
        uniq, codes = np.unique(raw, return_inverse=True)
        strata, levels = codes, tuple(float(u) for u in uniq)
    y0 = data[:, header.index(outcomes["y0"])] if "y0" in outcomes else None
    y1 = data[:, header.index(outcomes["y1"])] if "y1" in outcomes else None
    tiers = roles.get("tier_sizes") if columns is None else None
    return Population(
        values=x,
        labels=tuple(covs),
        tier_sizes=tuple(tiers) if tiers else None,
        strata=strata,
        stratum_column=scol,
        stratum_levels=levels,
        y0=y0,
        y1=y1,
    )


def write_population(pop: Population, path) -> Path:
    """Write covariates (plus outcomes) as CSV and roles as a JSON sidecar."""
    path = Path(path)
    header = list(pop.labels)
    cols = [pop.values]
    outcomes = {}
    for name in ("y0", "y1"):
        y = getattr(pop, name)
        if y is not None:
            header.append(name)
            outcomes[name] = name
            cols.append(y[:, None])
    table = np.hstack(cols)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in table:
                writer.writerow([repr(float(v)) for v in row])
        roles = {
            "covariates": list(pop.labels),
            "tier_sizes": list(pop.tier_sizes) if pop.tier_sizes else None,
            "stratum_column": pop.stratum_column,
            "outcomes": outcomes or None,
            "empty_levels": list(pop.empty_levels),
        }
        sidecar_path(path).write_text(json.dumps(roles, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path
