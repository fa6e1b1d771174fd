"""Synthetic labeled dataset generation.

Each sample is the image of a latent point under a map frozen by the spec's
map_seed. The latent point has two parts: class coordinates drawn from one
of n_classes Gaussian clusters (isotropic, sd = cluster_spread), and
high-variance nuisance coordinates shared by no class. The class part goes
through a random two-layer tanh map; the nuisance part is embedded along a
fixed orthonormal basis of the ambient space.

The nuisance subspace plays the role images' pose/color/background noise
plays at full scale: it dominates raw cosine distances (so a KNN on raw
inputs is a meaningful but beatable floor) while leaving the class geometry
fully recoverable by an encoder that learns to suppress it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DatasetSpec

# Latent geometry/map constants, frozen per map_seed.
CENTER_SCALE = 3.0
MAP_HIDDEN = 32
NUISANCE_DIM = 32
NUISANCE_SIGMA = 4.0


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    spec: DatasetSpec
    seed: int


@dataclass
class _FrozenMap:
    centers: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    nuisance_basis: np.ndarray  # (ambient_dim, NUISANCE_DIM), orthonormal columns
    out_scale: float = 1.0


def _raw_outputs(latent, nuisance, fmap: _FrozenMap) -> np.ndarray:
    signal = np.tanh(latent @ fmap.w1 + fmap.b1) @ fmap.w2 + fmap.b2
    return signal + nuisance @ fmap.nuisance_basis.T


def _frozen_map(spec: DatasetSpec, rng: np.random.Generator) -> _FrozenMap:
    centers = CENTER_SCALE * rng.standard_normal((spec.n_classes, spec.latent_dim))
    w1 = rng.standard_normal((spec.latent_dim, MAP_HIDDEN)) / np.sqrt(spec.latent_dim)
    b1 = 0.1 * rng.standard_normal(MAP_HIDDEN)
    w2 = rng.standard_normal((MAP_HIDDEN, spec.ambient_dim)) * (2.0 / np.sqrt(MAP_HIDDEN))
    b2 = 0.1 * rng.standard_normal(spec.ambient_dim)
    basis, _ = np.linalg.qr(rng.standard_normal((spec.ambient_dim, min(NUISANCE_DIM, spec.ambient_dim))))
    fmap = _FrozenMap(centers, w1, b1, w2, b2, basis)
    # Calibrate the output to roughly unit per-coordinate std (on a probe
    # sample drawn from the map rng) so augmentation strengths mean the same
    # thing for any geometry. Part of the frozen map, not of the data draw.
    probe_labels = rng.integers(0, spec.n_classes, size=512)
    probe_latent = centers[probe_labels] + spec.cluster_spread * rng.standard_normal((512, spec.latent_dim))
    probe_nuisance = spec.cluster_spread * NUISANCE_SIGMA * rng.standard_normal((512, basis.shape[1]))
    fmap.out_scale = 1.0 / float(_raw_outputs(probe_latent, probe_nuisance, fmap).std())
    return fmap


def _sample_split(n: int, spec: DatasetSpec, fmap: _FrozenMap, rng: np.random.Generator):
    # Round-robin labels keep the split class-balanced up to the remainder.
    # cluster_spread scales all per-sample variation, nuisance included, so
    # spread -> 0 collapses every class onto a single point.
    labels = np.arange(n, dtype=np.int64) % spec.n_classes
    latent = fmap.centers[labels] + spec.cluster_spread * rng.standard_normal((n, spec.latent_dim))
    nuisance = spec.cluster_spread * NUISANCE_SIGMA * rng.standard_normal((n, fmap.nuisance_basis.shape[1]))
    return fmap.out_scale * _raw_outputs(latent, nuisance, fmap), labels


def generate_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    """Deterministically sample a train/test split under the frozen map."""
    fmap = _frozen_map(spec, np.random.default_rng(spec.map_seed))
    rng = np.random.default_rng(seed)
    train_x, train_y = _sample_split(spec.n_train, spec, fmap, rng)
    test_x, test_y = _sample_split(spec.n_test, spec, fmap, rng)
    return Dataset(train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y, spec=spec, seed=seed)
