"""Neighbor weighting, feature-space mixing, and the weighted squared-error loss.

The loss for one anchor is

    loss = sum_{i=0..K} w_i * |p_hat - t_hat_i|^2

where t_0 is the teacher embedding of the positive view, t_1..t_K are the
(optionally mixed) neighbor embeddings, and hats denote unit normalization.
Weight index 0 always belongs to the positive term so the three weighting
schemes share a single evaluator.

Two evaluation paths share this implementation: the training path
(normalize=True) re-normalizes mixed targets as in the shipped method, and
an un-normalized path (normalize=False) that the exact quadratic-expansion
identities hold on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .support import NeighborSet
from .vecmath import l2_normalize, l2_normalize_rows

WEIGHT_TAGS = ("WSE", "MSE", "CAS")
MIX_MODES = ("off", "uniform", "fixed")
MIX_GRANULARITIES = ("per_batch", "per_neighbor")


@dataclass
class WeightScheme:
    """Tagged choice of weight generator; cas_gamma applies to CAS only."""

    tag: str
    cas_gamma: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.tag not in WEIGHT_TAGS:
            raise ValueError(f"unknown weight scheme {self.tag!r}")
        if self.cas_gamma is not None:
            self.cas_gamma = np.asarray(self.cas_gamma, dtype=np.float64)
            if np.any(self.cas_gamma <= 0):
                raise ValueError("cas_gamma entries must be positive")


@dataclass
class MixPolicy:
    """How the mixing coefficient is produced for each training step."""

    mode: str = "uniform"
    fixed_lambda: float | None = None
    granularity: str = "per_batch"

    def __post_init__(self) -> None:
        if self.mode not in MIX_MODES:
            raise ValueError(f"unknown mix mode {self.mode!r}")
        if self.granularity not in MIX_GRANULARITIES:
            raise ValueError(f"unknown mix granularity {self.granularity!r}")
        if self.mode == "fixed":
            if self.fixed_lambda is None:
                raise ValueError("fixed mix mode requires fixed_lambda")
            if not 0.0 <= self.fixed_lambda <= 1.0:
                raise ValueError("fixed_lambda must lie in [0, 1]")
        elif self.fixed_lambda is not None:
            raise ValueError("fixed_lambda is only valid with mode='fixed'")


@dataclass
class LossBreakdown:
    """One anchor's loss with the terms the total was assembled from."""

    total: float
    positive_term: float
    neighbor_terms: np.ndarray
    weights_used: np.ndarray
    lambda_used: float | np.ndarray


def weights_wse(k: int) -> np.ndarray:
    """Weight 1 on the positive, 1/K on each neighbor; [1] when K = 0."""
    if k < 0:
        raise ValueError("K must be non-negative")
    if k == 0:
        return np.array([1.0])
    return np.concatenate([[1.0], np.full(k, 1.0 / k)])


def weights_mse(k: int) -> np.ndarray:
    """Uniform 1/(K+1) over positive and neighbors (the mean-squared baseline)."""
    if k < 0:
        raise ValueError("K must be non-negative")
    return np.full(k + 1, 1.0 / (k + 1))


def weights_cas(neighbors: NeighborSet, q1, gamma=None) -> np.ndarray:
    """Cross-attention weights: softmax over cos(neighbor, q1), scaled by 1/gamma_i.

    q1 is the unit-norm student projection of the anchor's own view. Entry 0
    (the positive) stays 1. Undefined for an empty neighbor set.
    """
    k = neighbors.k
    if k == 0:
        raise ValueError("CAS weights are undefined without neighbors")
    q1 = np.asarray(q1, dtype=np.float64)
    if gamma is None:
        gamma = np.ones(k)
    else:
        gamma = np.asarray(gamma, dtype=np.float64) * np.ones(k)
        if gamma.shape != (k,):
            raise ValueError("gamma length must equal K")
        if np.any(gamma <= 0):
            raise ValueError("gamma entries must be positive")
    cos = np.clip(neighbors.embeddings @ q1, -1.0, 1.0)
    e = np.exp(cos)
    soft = e / e.sum()
    return np.concatenate([[1.0], soft / gamma])


def draw_lambda(policy: MixPolicy, rng, k: int) -> float | np.ndarray:
    """Produce the mixing coefficient(s) for one batch under the policy.

    off -> 1.0 (mixing disabled pointwise), fixed -> the configured value,
    uniform -> U(0,1): a scalar shared by the batch, or K draws when the
    granularity is per_neighbor.
    """
    if policy.mode == "off":
        return 1.0
    if policy.mode == "fixed":
        return float(policy.fixed_lambda)
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if policy.granularity == "per_neighbor":
        return gen.uniform(size=k)
    return float(gen.uniform())


def mix_neighbors(z2, neighbors: NeighborSet, policy: MixPolicy, rng=None):
    """Convex-combine each neighbor with the anchor: lam*n_i + (1-lam)*z2.

    Returns (mixed (K, C), lambda_used). Results are not re-normalized here;
    the loss normalizes its targets on the training path. mode=off returns
    the raw neighbor embeddings (lambda_used = 1.0).
    """
    z2 = np.asarray(z2, dtype=np.float64)
    lam = draw_lambda(policy, rng, neighbors.k)
    if policy.mode == "off":
        return neighbors.embeddings.copy(), 1.0
    lam_col = np.asarray(lam, dtype=np.float64).reshape(-1, 1)
    mixed = lam_col * neighbors.embeddings + (1.0 - lam_col) * z2[None, :]
    return mixed, lam


def _check_weights(weights, k: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k + 1,):
        raise ValueError(f"weights must have length K+1 = {k + 1}, got {w.shape}")
    return w


def mnn_loss(p1, z2, mixed, weights, normalize: bool = True, lambda_used=1.0) -> LossBreakdown:
    """Weighted squared-error loss of one anchor against positive + K targets.

    normalize=True (training path) unit-normalizes p1, z2, and every mixed
    target before the distances; normalize=False evaluates the quadratic on
    the raw inputs, which is the path the exact expansion identities hold on.
    A mixed target that is exactly zero cannot be normalized and raises with
    its neighbor index.
    """
    mixed = np.asarray(mixed, dtype=np.float64).reshape(-1, np.asarray(p1).shape[-1])
    k = mixed.shape[0]
    w = _check_weights(weights, k)
    p = np.asarray(p1, dtype=np.float64)
    z = np.asarray(z2, dtype=np.float64)
    if normalize:
        p = l2_normalize(p)
        z = l2_normalize(z)
        norms = np.linalg.norm(mixed, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if len(zero):
            raise ValueError(f"mixed neighbor {zero[0]} is a zero vector and cannot be normalized")
        mixed = mixed / norms[:, None]
    positive_term = float(np.sum((p - z) ** 2))
    neighbor_terms = np.sum((p[None, :] - mixed) ** 2, axis=1)
    terms = np.concatenate([[positive_term], neighbor_terms])
    # fsum keeps the total exactly permutation-invariant in the weighted terms.
    total = math.fsum(w * terms)
    return LossBreakdown(
        total=total,
        positive_term=positive_term,
        neighbor_terms=neighbor_terms,
        weights_used=w.copy(),
        lambda_used=lambda_used,
    )


def simplified_loss(p1, z2, raw_neighbors, lam: float, k: int) -> float:
    """Cross-term-free form: (1+(1-lam)^2)|p-z|^2 + (lam^2/K) sum |p-n_i|^2.

    Expects unit-norm inputs and the raw (un-mixed) neighbors; K >= 1.
    """
    if k < 1:
        raise ValueError("simplified loss requires K >= 1")
    p = np.asarray(p1, dtype=np.float64)
    z = np.asarray(z2, dtype=np.float64)
    nbrs = np.asarray(raw_neighbors, dtype=np.float64).reshape(k, -1)
    pos = float(np.sum((p - z) ** 2))
    nn = float(np.sum((p[None, :] - nbrs) ** 2))
    return (1.0 + (1.0 - lam) ** 2) * pos + (lam**2 / k) * nn


def loss_gradient_p1(p1, z2, mixed, weights, normalize: bool = True) -> np.ndarray:
    """Analytic d(loss)/d(p1), including the unit-normalization Jacobian.

    On the normalized path each term is 2 - 2*p_hat.t_hat_i, so the gradient
    is -2/|p| (I - p_hat p_hat^T) sum_i w_i t_hat_i. On the raw path it is
    the plain quadratic gradient sum_i 2 w_i (p - t_i).
    """
    mixed = np.asarray(mixed, dtype=np.float64).reshape(-1, np.asarray(p1).shape[-1])
    k = mixed.shape[0]
    w = _check_weights(weights, k)
    p = np.asarray(p1, dtype=np.float64)
    z = np.asarray(z2, dtype=np.float64)
    targets = np.concatenate([z[None, :], mixed])
    if not normalize:
        return 2.0 * np.sum(w[:, None] * (p[None, :] - targets), axis=0)
    norm_p = np.linalg.norm(p)
    if norm_p == 0.0:
        raise ValueError("cannot normalize a zero vector")
    p_hat = p / norm_p
    norms = np.linalg.norm(targets, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if len(zero):
        idx = zero[0] - 1
        raise ValueError(f"mixed neighbor {idx} is a zero vector and cannot be normalized")
    t_hat = targets / norms[:, None]
    u = np.sum(w[:, None] * t_hat, axis=0)
    return -2.0 * (u - (p_hat @ u) * p_hat) / norm_p


def mnn_loss_batch(p, z, mixed, weights, normalize: bool = True):
    """Vectorized twin of mnn_loss/loss_gradient_p1 over a minibatch.

    p, z: (N, C); mixed: (N, K, C) stop-gradient targets; weights: (K+1,) or
    (N, K+1). Returns (losses (N,), grad_p (N, C)). Verified against the
    per-sample ops to 1e-12 in the tests; this is the path the trainer runs.
    """
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    mixed = np.asarray(mixed, dtype=np.float64)
    n, c = p.shape
    k = 0 if mixed.size == 0 else mixed.shape[1]
    mixed = mixed.reshape(n, k, c)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = np.broadcast_to(w, (n, k + 1))
    if w.shape != (n, k + 1):
        raise ValueError(f"weights must broadcast to (N, K+1) = ({n}, {k + 1})")

    if normalize:
        norm_p = np.linalg.norm(p, axis=1)
        if np.any(norm_p == 0.0):
            raise ValueError("cannot normalize a zero student output")
        p_hat = p / norm_p[:, None]
        z_hat = l2_normalize_rows(z)
        if k:
            m_norms = np.linalg.norm(mixed, axis=2)
            bad = np.argwhere(m_norms == 0.0)
            if len(bad):
                r, i = bad[0]
                raise ValueError(f"mixed neighbor {i} of row {r} is a zero vector")
            m_hat = mixed / m_norms[:, :, None]
        else:
            m_hat = mixed
        pos = 2.0 - 2.0 * np.einsum("nc,nc->n", p_hat, z_hat)
        if k:
            nn = 2.0 - 2.0 * np.einsum("nc,nkc->nk", p_hat, m_hat)
        else:
            nn = np.empty((n, 0))
        losses = w[:, 0] * pos + np.einsum("nk,nk->n", w[:, 1:], nn)
        targets_sum = w[:, 0:1] * z_hat
        if k:
            targets_sum = targets_sum + np.einsum("nk,nkc->nc", w[:, 1:], m_hat)
        grad = -2.0 * (targets_sum - np.einsum("nc,nc->n", p_hat, targets_sum)[:, None] * p_hat)
        grad /= norm_p[:, None]
        return losses, grad

    pos = np.sum((p - z) ** 2, axis=1)
    if k:
        diffs = p[:, None, :] - mixed
        nn = np.sum(diffs**2, axis=2)
    else:
        diffs = np.empty((n, 0, c))
        nn = np.empty((n, 0))
    losses = w[:, 0] * pos + np.einsum("nk,nk->n", w[:, 1:], nn)
    grad = 2.0 * w[:, 0:1] * (p - z)
    if k:
        grad = grad + 2.0 * np.einsum("nk,nkc->nc", w[:, 1:], diffs)
    return losses, grad
