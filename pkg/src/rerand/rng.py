"""Counter-based random substreams.

Every random number in the package is a pure function of
``(seed, stream, index, slot)``: the SplitMix64 finalizer is applied to a
Weyl-sequence style combination of those integers.  Because nothing is
consumed sequentially, draw ``i`` is the same no matter how work is sharded,
batched or ordered across threads.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_SLOT_STEP = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

# stream identifiers; fixed forever, changing one changes every seeded result
ASSIGNMENT = 1
COIN = 2
NORMAL = 3
RADIAL = 4
LEVEL = 5
NOISE = 6
MIXTURE = 7
MIXTURE_CHECK = 8
SCORES = 9


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _stream_key(seed: int, stream: int) -> np.ndarray:
    base = np.array([int(seed) & _MASK], dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(base + _GOLDEN * np.uint64(stream + 1))


def uniforms(seed: int, stream: int, index, n_slots: int) -> np.ndarray:
    """Return an ``(len(index), n_slots)`` array of uniforms in (0, 1).

    ``index`` is any integer array-like of non-negative draw/row indices.
    """
    idx = np.asarray(index, dtype=np.uint64).reshape(-1)
    key = _stream_key(seed, stream)
    slots = np.arange(1, n_slots + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        row = _mix64(key ^ _mix64(idx * _GOLDEN + _M2))
        cell = _mix64(row[:, None] + slots[None, :] * _SLOT_STEP)
    return ((cell >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53


def normals(seed: int, stream: int, index, n_slots: int) -> np.ndarray:
    """Standard normal draws by inversion of :func:`uniforms`."""
    return ndtri(uniforms(seed, stream, index, n_slots))


def chi2_slots(dof: int) -> int:
    """Number of uniforms consumed by :func:`chi2_from_uniforms` for ``dof``."""
    return dof // 2 + dof % 2


def chi2_from_uniforms(u: np.ndarray, dof: int) -> np.ndarray:
    """Exact chi-square(dof) variates from ``chi2_slots(dof)`` uniform columns.

    Pairs of degrees of freedom are exponentials (-2 log U); an odd leftover
    degree is a squared normal.
    """
    pairs = dof // 2
    out = np.zeros(u.shape[0])
    if pairs:
        out -= 2.0 * np.log(u[:, :pairs]).sum(axis=1)
    if dof % 2:
        out += ndtri(u[:, pairs]) ** 2
    return out
