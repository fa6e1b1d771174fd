"""Synthetic dataset generation: determinism, balance, difficulty floor."""

import numpy as np
import pytest

from mixnn.harness.config import DatasetSpec
from mixnn.harness.dataset import generate_dataset
from mixnn.harness.training import raw_floor_knn


def small_spec(**kw):
    defaults = dict(n_classes=4, n_train=200, n_test=80, ambient_dim=16, latent_dim=4)
    defaults.update(kw)
    return DatasetSpec(**defaults)


class TestGenerateDataset:
    def test_same_seed_bit_identical(self):
        spec = small_spec()
        a = generate_dataset(spec, 5)
        b = generate_dataset(spec, 5)
        np.testing.assert_array_equal(a.train_x, b.train_x)
        np.testing.assert_array_equal(a.test_x, b.test_x)
        np.testing.assert_array_equal(a.train_y, b.train_y)

    def test_different_seeds_differ(self):
        spec = small_spec()
        a = generate_dataset(spec, 5)
        b = generate_dataset(spec, 6)
        assert not np.allclose(a.train_x, b.train_x)

    def test_map_frozen_across_seeds(self):
        # Same map_seed, different draws: class means stay put.
        spec = small_spec(n_train=2000)
        a = generate_dataset(spec, 1)
        b = generate_dataset(spec, 2)
        for c in range(spec.n_classes):
            mean_a = a.train_x[a.train_y == c].mean(axis=0)
            mean_b = b.train_x[b.train_y == c].mean(axis=0)
            assert np.linalg.norm(mean_a - mean_b) < 0.5 * np.linalg.norm(mean_a) + 0.5

    def test_class_balanced(self):
        data = generate_dataset(small_spec(), 3)
        counts = np.bincount(data.train_y, minlength=4)
        assert counts.max() - counts.min() <= 1

    def test_shapes(self):
        spec = small_spec()
        data = generate_dataset(spec, 0)
        assert data.train_x.shape == (200, 16)
        assert data.test_x.shape == (80, 16)
        assert data.train_y.shape == (200,)

    def test_zero_spread_collapses_clusters(self):
        spec = small_spec(cluster_spread=0.0, n_train=40, n_test=20)
        data = generate_dataset(spec, 2)
        for c in range(spec.n_classes):
            same = data.train_x[data.train_y == c]
            np.testing.assert_array_equal(same, np.broadcast_to(same[0], same.shape))
        # Degenerate clusters make perfect raw KNN trivially achievable.
        assert raw_floor_knn(data, k_eval=5) == 1.0

    def test_ambient_smaller_than_latent_rejected(self):
        with pytest.raises(ValueError, match="ambient_dim"):
            DatasetSpec(n_classes=3, ambient_dim=4, latent_dim=8)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="classes"):
            DatasetSpec(n_classes=1)


class TestReferenceFloor:
    def test_raw_knn_floor_between_chance_and_perfect(self):
        # The floor baseline a learned representation should beat.
        data = generate_dataset(DatasetSpec(), 1)
        floor = raw_floor_knn(data, k_eval=20)
        assert 1.0 / 10.0 < floor < 1.0
