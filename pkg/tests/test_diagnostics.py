"""Purity, weight entropy, order inconsistency, and per-position purity."""

import math

import numpy as np
import pytest

from mixnn.diagnostics import (
    PurityRecord,
    inconsistency,
    positional_purity,
    purity,
    reorder_by_cas,
    weight_entropy,
)
from mixnn.support import NeighborSet
from mixnn.vecmath import l2_normalize, l2_normalize_rows


def make_ns(labels, order_key="cosine_desc", rng=None, embeddings=None, sims=None):
    labels = np.asarray(labels, dtype=np.int64)
    k = len(labels)
    rng = rng or np.random.default_rng(0)
    if embeddings is None:
        embeddings = l2_normalize_rows(rng.standard_normal((k, 6)))
    if sims is None:
        sims = -np.arange(k, dtype=float)
    return NeighborSet(
        anchor=l2_normalize(rng.standard_normal(6)),
        embeddings=embeddings,
        similarities=np.asarray(sims, dtype=float),
        support_indices=np.arange(k),
        labels=labels,
        order_key=order_key,
    )


class TestPurity:
    def test_all_match(self):
        assert purity(make_ns([2, 2, 2]), 2) == 1.0

    def test_none_match(self):
        assert purity(make_ns([0, 1, 3]), 2) == 0.0

    def test_three_of_five(self):
        assert purity(make_ns([4, 4, 1, 4, 0]), 4) == 0.6

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 3, size=8)
        base = purity(make_ns(labels), 1)
        for _ in range(10):
            assert purity(make_ns(rng.permutation(labels)), 1) == base

    def test_missing_labels_raise(self):
        with pytest.raises(ValueError, match="label"):
            purity(make_ns([1, -1, 2]), 1)

    def test_empty_set_raises(self):
        with pytest.raises(ValueError):
            purity(make_ns([]), 0)


class TestWeightEntropy:
    def test_uniform_is_log_k(self):
        assert abs(weight_entropy(np.full(5, 0.2)) - math.log(5)) <= 1e-12

    def test_one_hot_is_zero(self):
        assert weight_entropy([0.0, 1.0, 0.0]) == 0.0

    def test_two_point_distribution(self):
        # Oracle: direct -sum(q ln q) evaluation.
        w = np.array([0.8808, 0.1192])
        q = w / w.sum()
        expected = -float(np.sum(q * np.log(q)))
        assert abs(weight_entropy(w) - expected) <= 1e-15
        assert abs(expected - 0.3653280110023116) <= 1e-12  # frozen from the oracle

    def test_scale_invariant(self):
        rng = np.random.default_rng(2)
        w = rng.uniform(0.1, 1.0, size=6)
        assert abs(weight_entropy(w) - weight_entropy(10.0 * w)) <= 1e-12

    def test_bounded_by_log_k(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            k = int(rng.integers(1, 10))
            w = rng.uniform(0.0, 1.0, size=k)
            if w.sum() == 0:
                continue
            assert weight_entropy(w) <= math.log(k) + 1e-12

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            weight_entropy([0.5, -0.1])

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            weight_entropy([0.0, 0.0])


class TestInconsistency:
    def test_identical_orderings(self):
        a = make_ns([0, 1, 2])
        assert inconsistency(a, a) == 0.0

    def test_full_swap_k2(self):
        a = make_ns([0, 1])
        b = NeighborSet(
            anchor=a.anchor,
            embeddings=a.embeddings[::-1].copy(),
            similarities=a.similarities[::-1].copy(),
            support_indices=a.support_indices[::-1].copy(),
            labels=a.labels[::-1].copy(),
            order_key="cas_desc",
        )
        assert inconsistency(a, b) == 1.0

    def test_single_adjacent_transposition(self):
        # Oracle: positions 1 and 2 differ out of 5 -> 2/5.
        a = make_ns([0, 1, 2, 3, 4])
        perm = [0, 2, 1, 3, 4]
        b = NeighborSet(
            anchor=a.anchor,
            embeddings=a.embeddings[perm].copy(),
            similarities=a.similarities[perm].copy(),
            support_indices=a.support_indices[perm].copy(),
            labels=a.labels[perm].copy(),
            order_key="cas_desc",
        )
        assert inconsistency(a, b) == 0.4

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a = make_ns(rng.integers(0, 3, size=6))
        perm = rng.permutation(6)
        b = NeighborSet(
            anchor=a.anchor,
            embeddings=a.embeddings[perm].copy(),
            similarities=a.similarities[perm].copy(),
            support_indices=a.support_indices[perm].copy(),
            labels=a.labels[perm].copy(),
            order_key="cas_desc",
        )
        assert inconsistency(a, b) == inconsistency(b, a)

    def test_member_mismatch_rejected(self):
        a = make_ns([0, 1, 2])
        b = make_ns([0, 1, 2])
        b.support_indices = np.array([5, 6, 7])
        with pytest.raises(ValueError, match="members"):
            inconsistency(a, b)

    def test_duplicate_embeddings_distinct_identities(self):
        # Identity comparison: equal embeddings with different support
        # indices still count as different members.
        rng = np.random.default_rng(5)
        emb = l2_normalize_rows(rng.standard_normal((1, 6)))
        dup = np.vstack([emb, emb])
        a = make_ns([0, 0], embeddings=dup)
        b = NeighborSet(
            anchor=a.anchor,
            embeddings=dup.copy(),
            similarities=a.similarities[::-1].copy(),
            support_indices=a.support_indices[::-1].copy(),
            labels=a.labels[::-1].copy(),
            order_key="cas_desc",
        )
        assert inconsistency(a, b) == 1.0


class TestReorderByCas:
    def test_sorted_by_descending_cas_weight(self):
        rng = np.random.default_rng(6)
        ns = make_ns(rng.integers(0, 3, size=5), rng=rng)
        q = l2_normalize(rng.standard_normal(6))
        out = reorder_by_cas(ns, q)
        cas = np.exp(np.clip(out.embeddings @ q, -1, 1))
        assert np.all(np.diff(cas) <= 1e-15)
        assert out.order_key == "cas_desc"

    def test_preserves_member_multiset_and_purity(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            ns = make_ns(rng.integers(0, 4, size=6), rng=rng)
            q = l2_normalize(rng.standard_normal(6))
            out = reorder_by_cas(ns, q)
            assert sorted(out.support_indices.tolist()) == sorted(ns.support_indices.tolist())
            assert purity(out, 2) == purity(ns, 2)


class TestPositionalPurity:
    def test_single_record_all_match(self):
        result = positional_purity([(make_ns([3, 3, 3]), 3)])
        np.testing.assert_allclose(result, [1.0, 1.0, 1.0], atol=0)

    def test_half_match_at_position_one(self):
        records = [(make_ns([1, 0]), 1), (make_ns([0, 0]), 1)]
        result = positional_purity(records)
        np.testing.assert_allclose(result, [0.5, 0.0], atol=0)

    def test_mean_over_positions_equals_aggregate_purity(self):
        # Consistency oracle: grand mean of the indicator matrix both ways.
        rng = np.random.default_rng(8)
        records = []
        purities = []
        for _ in range(1000):
            labels = rng.integers(0, 3, size=5)
            anchor = int(rng.integers(0, 3))
            ns = make_ns(labels, rng=rng)
            records.append((ns, anchor))
            purities.append(purity(ns, anchor))
        per_position = positional_purity(records)
        assert abs(float(np.mean(per_position)) - float(np.mean(purities))) <= 1e-12

    def test_not_permutation_invariant_by_design(self):
        records_a = [(make_ns([1, 0]), 1)]
        records_b = [(make_ns([0, 1]), 1)]
        assert not np.allclose(positional_purity(records_a), positional_purity(records_b))

    def test_empty_stream_raises(self):
        with pytest.raises(ValueError, match="empty"):
            positional_purity([])

    def test_inconsistent_k_raises(self):
        with pytest.raises(ValueError, match="K"):
            positional_purity([(make_ns([1, 2]), 1), (make_ns([1, 2, 3]), 1)])

    def test_purity_record_shape(self):
        rec = PurityRecord(step=3, k=2, purity=0.5, strategy="cosine", per_position=np.array([1.0, 0.0]))
        assert rec.purity == float(np.mean(rec.per_position))
