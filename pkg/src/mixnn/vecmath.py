"""Dense vector primitives shared by every other module.

All arithmetic is float64. Embeddings are plain numpy arrays: a single
embedding is a 1-D array of length C, a batch is an (N, C) matrix whose
rows are embeddings. "Unit" always means unit L2 norm.
"""

from __future__ import annotations

import numpy as np

# |norm - 1| tolerance for inputs that are contractually unit-norm.
UNIT_ATOL = 1e-9


def as_vector(v) -> np.ndarray:
    """Coerce to a 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale v to unit L2 norm, preserving direction.

    Raises ValueError on a zero vector rather than returning NaNs.
    """
    arr = as_vector(v)
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return arr / norm


def l2_normalize_rows(m) -> np.ndarray:
    """Row-wise unit normalization of an (N, C) matrix."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected an (N, C) matrix, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    zero = norms == 0.0
    if np.any(zero):
        raise ValueError(f"cannot normalize zero row(s) at index {np.flatnonzero(zero)[0]}")
    return arr / norms[:, None]


def is_unit(v, atol: float = UNIT_ATOL) -> bool:
    arr = np.asarray(v, dtype=np.float64)
    return bool(abs(np.linalg.norm(arr) - 1.0) <= atol)


def rowwise_topk(sims, k: int) -> np.ndarray:
    """Top-k column indices per row by (descending value, ascending index).

    argpartition picks k candidates per row in O(Q); an index-then-value
    stable sort orders them exactly. Rows where equal values straddle the
    partition boundary (so the candidate choice was ambiguous) are redone
    with a full exact sort — vanishingly rare for continuous similarities.
    """
    sims = np.asarray(sims, dtype=np.float64)
    n, q = sims.shape
    if k == 0:
        return np.empty((n, 0), dtype=np.intp)
    if not 0 < k <= q:
        raise ValueError(f"k={k} outside [1, {q}]")
    if k >= q:
        part = np.broadcast_to(np.arange(q), (n, q))
    else:
        part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    idx_sorted = np.sort(part, axis=1)
    vals = np.take_along_axis(sims, idx_sorted, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    top = np.take_along_axis(idx_sorted, order, axis=1)
    if k < q:
        boundary = np.take_along_axis(sims, top[:, -1:], axis=1)
        ambiguous = (sims == boundary).sum(axis=1) > (vals == boundary).sum(axis=1)
        for i in np.flatnonzero(ambiguous):
            top[i] = np.lexsort((np.arange(q), -sims[i]))[:k]
    return top


def cosine(a, b) -> float:
    """Cosine similarity dot(a,b)/(|a||b|), clamped to [-1, 1].

    The clamp guards downstream code against values like 1 + 1e-16 from
    rounding. Zero vectors and dimension mismatches raise.
    """
    va, vb = as_vector(a), as_vector(b)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def sq_dist_unit(a, b) -> float:
    """Squared euclidean distance between unit vectors, as 2 - 2*cos(a, b).

    Inputs must already be unit-norm (checked to UNIT_ATOL); for such
    vectors the value equals |a - b|^2 and lies in [0, 4].
    """
    va, vb = as_vector(a), as_vector(b)
    if not is_unit(va):
        raise ValueError("first argument is not unit-norm")
    if not is_unit(vb):
        raise ValueError("second argument is not unit-norm")
    return 2.0 - 2.0 * cosine(va, vb)
