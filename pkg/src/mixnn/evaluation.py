"""Frozen-feature evaluation: cosine-KNN classification and a linear probe.

Both protocols consume a FeatureBank of unit-normalized backbone features.
KNN takes a majority vote over the most similar bank rows; the probe trains
a single affine layer with softmax cross-entropy on the frozen features by
full-batch gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vecmath import l2_normalize_rows, rowwise_topk

DEFAULT_K_EVAL = 20


@dataclass
class FeatureBank:
    """Unit-norm feature matrix with integer class labels per row."""

    features: np.ndarray  # (n, D), rows unit-norm
    labels: np.ndarray  # (n,), int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be an (n, D) matrix")
        if len(self.features) != len(self.labels):
            raise ValueError("feature row count must equal label count")
        norms = np.linalg.norm(self.features, axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("feature rows must be unit-normalized")

    def __len__(self) -> int:
        return len(self.labels)


def bank_from_features(features, labels) -> FeatureBank:
    """Normalize raw feature rows and wrap them in a FeatureBank."""
    return FeatureBank(l2_normalize_rows(features), labels)


@dataclass
class ProbeConfig:
    """Linear-probe training schedule (full-batch SGD with momentum)."""

    epochs: int = 100
    lr: float = 0.1
    milestones: tuple[int, ...] = (60, 80)
    decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0


def _vote(labels_k: np.ndarray, sims_k: np.ndarray, classes: np.ndarray) -> int:
    """Majority vote; ties go to higher summed similarity, then lower class id."""
    counts = np.zeros(len(classes), dtype=np.int64)
    sim_sums = np.zeros(len(classes), dtype=np.float64)
    pos = np.searchsorted(classes, labels_k)
    np.add.at(counts, pos, 1)
    np.add.at(sim_sums, pos, sims_k)
    best = np.flatnonzero(counts == counts.max())
    if len(best) > 1:
        top_sim = sim_sums[best].max()
        best = best[sim_sums[best] == top_sim]
    return int(classes[best[0]])


def knn_classify(bank: FeatureBank, query, k_eval: int = DEFAULT_K_EVAL) -> int:
    """Predict one query's class by unweighted vote over its top-k_eval bank rows."""
    preds = knn_predict(bank, np.asarray(query, dtype=np.float64)[None, :], k_eval)
    return int(preds[0])


def knn_predict(bank: FeatureBank, queries, k_eval: int = DEFAULT_K_EVAL) -> np.ndarray:
    """Vectorized KNN prediction for an (m, D) block of unit-norm queries."""
    if len(bank) == 0:
        raise ValueError("empty feature bank")
    if not 1 <= k_eval <= len(bank):
        raise ValueError(f"k_eval={k_eval} outside [1, {len(bank)}]")
    q = np.asarray(queries, dtype=np.float64)
    sims = q @ bank.features.T  # (m, n)
    # top-k by (similarity desc, bank index asc) keeps selection deterministic.
    idx = rowwise_topk(sims, k_eval)
    classes = np.unique(bank.labels)
    preds = np.empty(len(q), dtype=np.int64)
    for i in range(len(q)):
        preds[i] = _vote(bank.labels[idx[i]], sims[i, idx[i]], classes)
    return preds


def knn_accuracy(bank: FeatureBank, queries, labels, k_eval: int = DEFAULT_K_EVAL) -> float:
    preds = knn_predict(bank, queries, k_eval)
    return float(np.mean(preds == np.asarray(labels)))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(bank_train: FeatureBank, bank_test: FeatureBank, config: ProbeConfig | None = None) -> float:
    """Train an affine softmax classifier on frozen features; return test top-1.

    Deterministic: zero init, full-batch gradient descent with the stepped
    learning-rate schedule from the config.
    """
    cfg = config or ProbeConfig()
    classes = np.unique(bank_train.labels)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes in the training bank")
    if bank_train.features.shape[1] != bank_test.features.shape[1]:
        raise ValueError("train/test feature dimensions differ")
    x = bank_train.features
    class_pos = {c: i for i, c in enumerate(classes.tolist())}
    y = np.array([class_pos[c] for c in bank_train.labels.tolist()])
    n, d = x.shape
    c = len(classes)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    w = np.zeros((d, c))
    b = np.zeros(c)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch in cfg.milestones:
            lr *= cfg.decay
        probs = _softmax_rows(x @ w + b)
        err = (probs - onehot) / n
        gw = x.T @ err + cfg.weight_decay * w
        gb = err.sum(axis=0)
        vw = cfg.momentum * vw + gw
        vb = cfg.momentum * vb + gb
        w -= lr * vw
        b -= lr * vb

    logits = bank_test.features @ w + b
    preds = classes[np.argmax(logits, axis=1)]
    return float(np.mean(preds == bank_test.labels))
