"""Label-aware measurements of neighbor quality.

These read the hidden labels that training itself never sees: purity of a
neighbor set, entropy of a weight distribution, order disagreement between
the cosine ranking and the cross-attention ranking, and per-position purity
aggregated over a stream of queries. Everything here is read-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import weights_cas
from .support import NO_LABEL, NeighborSet


@dataclass
class PurityRecord:
    """One probe measurement: aggregate and per-position purity at a step."""

    step: int
    k: int
    purity: float
    strategy: str
    per_position: np.ndarray


def purity(neighbors: NeighborSet, anchor_label: int) -> float:
    """Fraction of members whose hidden label matches the anchor's."""
    if neighbors.k == 0:
        raise ValueError("purity is undefined for an empty neighbor set")
    if not neighbors.has_labels():
        raise ValueError("neighbor set is missing hidden labels")
    return float(np.mean(neighbors.labels == anchor_label))


def weight_entropy(neighbor_weights) -> float:
    """Shannon entropy (nats) of the renormalized weight distribution.

    Zero weights contribute nothing (0*ln 0 = 0); negative weights are
    rejected. Bounded above by ln K, with equality iff uniform.
    """
    w = np.asarray(neighbor_weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0:
        raise ValueError("expected a non-empty 1-D weight vector")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total == 0:
        raise ValueError("weights must not all be zero")
    q = w / total
    nz = q[q > 0]
    return float(-np.sum(nz * np.log(nz)))


def inconsistency(cos_order: NeighborSet, cas_order: NeighborSet) -> float:
    """Fraction of positions whose member identity differs between orderings.

    Identity is the support index (age), so exact duplicate embeddings with
    distinct indices still compare as distinct members.
    """
    a, b = cos_order.support_indices, cas_order.support_indices
    if len(a) != len(b) or set(a.tolist()) != set(b.tolist()):
        raise ValueError("neighbor sets do not contain the same members")
    if len(a) == 0:
        raise ValueError("inconsistency is undefined for empty neighbor sets")
    return float(np.mean(a != b))


def reorder_by_cas(neighbors: NeighborSet, q1, gamma=None) -> NeighborSet:
    """Re-rank members by descending cross-attention weight.

    Ties fall back to the smaller support index for determinism. The member
    multiset is preserved, so aggregate purity is unchanged by construction.
    """
    w = weights_cas(neighbors, q1, gamma)[1:]
    order = np.lexsort((neighbors.support_indices, -w))
    return NeighborSet(
        anchor=neighbors.anchor,
        embeddings=neighbors.embeddings[order].copy(),
        similarities=neighbors.similarities[order].copy(),
        support_indices=neighbors.support_indices[order].copy(),
        labels=neighbors.labels[order].copy(),
        order_key="cas_desc",
        oracle_shortfall=neighbors.oracle_shortfall,
    )


def positional_purity(records) -> np.ndarray:
    """Per-position match rates over a stream of (NeighborSet, anchor_label).

    Position j's value is the fraction of records whose j-th member carries
    the anchor's label. All records must share the same K and carry labels.
    The mean over positions equals the aggregate purity of the stream.
    """
    matches = None
    count = 0
    for neighbors, anchor_label in records:
        if neighbors.k == 0:
            raise ValueError("positional purity is undefined for empty neighbor sets")
        if np.any(neighbors.labels == NO_LABEL):
            raise ValueError("neighbor set is missing hidden labels")
        row = (neighbors.labels == anchor_label).astype(np.float64)
        if matches is None:
            matches = np.zeros_like(row)
        elif len(row) != len(matches):
            raise ValueError("records disagree on K")
        matches += row
        count += 1
    if matches is None:
        raise ValueError("empty record stream")
    return matches / count
