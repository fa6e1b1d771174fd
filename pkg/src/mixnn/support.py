"""FIFO support set of teacher embeddings and the neighbor-selection strategies.

The store keeps at most `capacity` unit-norm embeddings in insertion order
(oldest first). Each entry carries a monotonically increasing `age` used as
its stable identity, and an optional hidden class label that exists only for
diagnostics and the oracle strategy: label data never influences cosine or
random selection, which is part of the contract and tested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vecmath import l2_normalize, l2_normalize_rows

# Sentinel for "no label" in the int64 label array.
NO_LABEL = -1

#: Valid NeighborSet.order_key tags.
ORDER_KEYS = ("cosine_desc", "random", "oracle", "cas_desc")


@dataclass
class NeighborSet:
    """Ordered result of one neighbor query.

    Members are stored as parallel arrays: embeddings (K, C), similarities
    (K,), support_indices (K,) — the ages of the selected entries — and
    labels (K,) with NO_LABEL where unknown. `anchor` is the query embedding
    when one was supplied. `oracle_shortfall` flags an oracle query that had
    to pad with top-cosine entries.
    """

    anchor: np.ndarray | None
    embeddings: np.ndarray
    similarities: np.ndarray
    support_indices: np.ndarray
    labels: np.ndarray
    order_key: str
    oracle_shortfall: bool = False

    def __post_init__(self) -> None:
        if self.order_key not in ORDER_KEYS:
            raise ValueError(f"unknown order_key {self.order_key!r}")
        k = len(self.support_indices)
        if not (len(self.embeddings) == len(self.similarities) == len(self.labels) == k):
            raise ValueError("member arrays have inconsistent lengths")
        if len(np.unique(self.support_indices)) != k:
            raise ValueError("a support entry appears twice in the neighbor set")

    def __len__(self) -> int:
        return len(self.support_indices)

    @property
    def k(self) -> int:
        return len(self.support_indices)

    def has_labels(self) -> bool:
        return bool(len(self.labels)) and bool(np.all(self.labels != NO_LABEL))


def _empty_neighbor_set(anchor, dim: int, order_key: str) -> NeighborSet:
    return NeighborSet(
        anchor=anchor,
        embeddings=np.empty((0, dim), dtype=np.float64),
        similarities=np.empty(0, dtype=np.float64),
        support_indices=np.empty(0, dtype=np.int64),
        labels=np.empty(0, dtype=np.int64),
        order_key=order_key,
    )


@dataclass
class SupportSet:
    """Fixed-capacity FIFO store of unit-norm embeddings with hidden labels."""

    dim: int
    capacity: int
    embeddings: np.ndarray = field(default=None)  # type: ignore[assignment]
    labels: np.ndarray = field(default=None)  # type: ignore[assignment]
    ages: np.ndarray = field(default=None)  # type: ignore[assignment]
    next_age: int = 0

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if self.embeddings is None:
            self.embeddings = np.empty((0, self.dim), dtype=np.float64)
        if self.labels is None:
            self.labels = np.empty(0, dtype=np.int64)
        if self.ages is None:
            self.ages = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ages)

    @property
    def count(self) -> int:
        return len(self.ages)

    def refresh(self, batch, labels=None) -> "SupportSet":
        """Enqueue a batch (normalizing rows at insertion), evicting the oldest
        entries beyond capacity. Returns self for chaining."""
        rows = np.asarray(batch, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: set dim {self.dim}, batch dim {rows.shape[1]}")
        n = rows.shape[0]
        if n > self.capacity:
            raise ValueError(f"batch of {n} exceeds capacity {self.capacity}")
        rows = l2_normalize_rows(rows)
        if labels is None:
            new_labels = np.full(n, NO_LABEL, dtype=np.int64)
        else:
            new_labels = np.asarray(labels, dtype=np.int64)
            if new_labels.shape != (n,):
                raise ValueError("labels length must match batch size")
        new_ages = np.arange(self.next_age, self.next_age + n, dtype=np.int64)
        self.next_age += n

        self.embeddings = np.concatenate([self.embeddings, rows])[-self.capacity:]
        self.labels = np.concatenate([self.labels, new_labels])[-self.capacity:]
        self.ages = np.concatenate([self.ages, new_ages])[-self.capacity:]
        return self

    def _check_query(self, k: int) -> None:
        if k < 0:
            raise ValueError("K must be non-negative")
        if k > self.count:
            raise ValueError(f"K={k} exceeds support set count {self.count}")

    def _gather(self, idx, anchor, order_key, shortfall=False) -> NeighborSet:
        if anchor is None:
            sims = np.full(len(idx), np.nan)
        else:
            sims = np.clip(self.embeddings[idx] @ anchor, -1.0, 1.0)
        return NeighborSet(
            anchor=anchor,
            embeddings=self.embeddings[idx].copy(),
            similarities=np.asarray(sims, dtype=np.float64),
            support_indices=self.ages[idx].copy(),
            labels=self.labels[idx].copy(),
            order_key=order_key,
            oracle_shortfall=shortfall,
        )

    def topk_neighbors(self, z, k: int) -> NeighborSet:
        """K entries with largest cosine to unit-norm z, descending.

        Ties in similarity resolve to the older entry (smaller age) so the
        result is a deterministic function of the (embedding, age) contents.
        K = 0 is the valid degenerate case and yields an empty set.
        """
        self._check_query(k)
        z = l2_normalize(np.asarray(z, dtype=np.float64))
        if z.shape[0] != self.dim:
            raise ValueError("query dimension mismatch")
        if k == 0:
            return _empty_neighbor_set(z, self.dim, "cosine_desc")
        sims = self.embeddings @ z
        # lexsort: primary descending similarity, secondary ascending age.
        order = np.lexsort((self.ages, -sims))[:k]
        return self._gather(order, z, "cosine_desc")

    def random_neighbors(self, k: int, rng, anchor=None) -> NeighborSet:
        """K distinct entries drawn uniformly without replacement.

        `rng` is an integer seed or a numpy Generator. The optional anchor
        only fills the similarity fields; it never affects the draw.
        """
        self._check_query(k)
        gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        if anchor is not None:
            anchor = l2_normalize(np.asarray(anchor, dtype=np.float64))
        if k == 0:
            return _empty_neighbor_set(anchor, self.dim, "random")
        idx = gen.choice(self.count, size=k, replace=False)
        return self._gather(idx, anchor, "random")

    def oracle_neighbors(self, anchor_label: int, k: int, rng, anchor=None) -> NeighborSet:
        """K entries sharing anchor_label, uniform among candidates.

        With fewer than K labeled matches the query does not fail mid-run:
        it returns all matches padded by the top-cosine remainder (anchor
        required) and sets oracle_shortfall so callers can count the event.
        """
        self._check_query(k)
        gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        if anchor is not None:
            anchor = l2_normalize(np.asarray(anchor, dtype=np.float64))
        if k == 0:
            return _empty_neighbor_set(anchor, self.dim, "oracle")
        candidates = np.flatnonzero(self.labels == anchor_label)
        if len(candidates) >= k:
            idx = gen.choice(candidates, size=k, replace=False)
            return self._gather(idx, anchor, "oracle")
        if anchor is None:
            raise ValueError(
                f"only {len(candidates)} entries carry label {anchor_label} "
                f"(need {k}) and no anchor was given for the top-cosine fallback"
            )
        sims = self.embeddings @ anchor
        order = np.lexsort((self.ages, -sims))
        pad = [i for i in order if self.labels[i] != anchor_label][: k - len(candidates)]
        idx = np.concatenate([candidates, np.asarray(pad, dtype=np.intp)])
        return self._gather(idx.astype(np.intp), anchor, "oracle", shortfall=True)

    def to_snapshot(self) -> dict:
        """JSON-serializable snapshot (resume + offline label analysis)."""
        return {
            "dim": self.dim,
            "capacity": self.capacity,
            "next_age": self.next_age,
            "embeddings": self.embeddings.tolist(),
            "labels": self.labels.tolist(),
            "ages": self.ages.tolist(),
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "SupportSet":
        return cls(
            dim=int(snap["dim"]),
            capacity=int(snap["capacity"]),
            embeddings=np.asarray(snap["embeddings"], dtype=np.float64).reshape(-1, int(snap["dim"])),
            labels=np.asarray(snap["labels"], dtype=np.int64),
            ages=np.asarray(snap["ages"], dtype=np.int64),
            next_age=int(snap["next_age"]),
        )
