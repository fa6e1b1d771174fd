"""The training loop, checkpointing, and frozen-feature evaluation.

Per step: augment the batch into a strong view (student) and a weak view
(teacher), run both branches, select neighbors for each teacher embedding
from the FIFO support set, mix them toward the anchor, evaluate the weighted
squared-error loss, backpropagate through the student only, take an SGD
step, EMA the teacher, and finally enqueue the weak-view teacher embeddings
into the support set (queries always precede the refresh).

The symmetric variant adds the mirrored direction (weak view through the
student, strong view through the teacher) and averages the two losses.
Every random draw comes from named generators spawned off the run seed, so
a (config, seed, build) triple reproduces a run bit-for-bit.
"""

from __future__ import annotations

import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__ as package_version
from ..evaluation import FeatureBank, bank_from_features, knn_accuracy, linear_probe
from ..model import (
    EncoderPair,
    LrSchedule,
    augment_batch,
    backward,
    build_encoder_pair,
    ema_update,
    forward,
    lr_at,
    policy_for,
    sgd_step,
)
from ..objective import draw_lambda, mnn_loss_batch, weights_mse, weights_wse
from ..support import SupportSet
from ..vecmath import l2_normalize_rows, rowwise_topk
from .config import ResolvedMethod, RunConfig, config_to_dict, resolve_method, run_id_for
from .dataset import Dataset, generate_dataset

SCHEMA_VERSION = 1
CHECKPOINT_NAME = "checkpoint.npz"
MANIFEST_NAME = "manifest.json"

EPOCH_METRIC_KEYS = ("epoch", "loss_mean", "lr", "purity", "entropy_mean", "inconsistency_mean")


@dataclass
class RunManifest:
    """Everything needed to reproduce and report one run."""

    run_id: str
    config: dict
    epoch_metrics: dict
    knn_acc: float | None = None
    probe_acc: float | None = None
    knn_acc_untrained: float | None = None
    knn_acc_raw_floor: float | None = None
    oracle_shortfall_events: int = 0
    wall_clock_s: float = 0.0
    env: dict = field(default_factory=dict)
    checkpoint_path: str | None = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "run_id": self.run_id,
            "config": self.config,
            "epoch_metrics": self.epoch_metrics,
            "final": {
                "knn_acc": self.knn_acc,
                "probe_acc": self.probe_acc,
                "knn_acc_untrained": self.knn_acc_untrained,
                "knn_acc_raw_floor": self.knn_acc_raw_floor,
            },
            "oracle_shortfall_events": self.oracle_shortfall_events,
            "wall_clock_s": self.wall_clock_s,
            "env": self.env,
            "checkpoint_path": self.checkpoint_path,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        final = data.get("final", {})
        return cls(
            run_id=data["run_id"],
            config=data["config"],
            epoch_metrics=data["epoch_metrics"],
            knn_acc=final.get("knn_acc"),
            probe_acc=final.get("probe_acc"),
            knn_acc_untrained=final.get("knn_acc_untrained"),
            knn_acc_raw_floor=final.get("knn_acc_raw_floor"),
            oracle_shortfall_events=data.get("oracle_shortfall_events", 0),
            wall_clock_s=data.get("wall_clock_s", 0.0),
            env=data.get("env", {}),
            checkpoint_path=data.get("checkpoint_path"),
            schema_version=data.get("schema_version", SCHEMA_VERSION),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _env_stamp() -> dict:
    return {
        "package_version": package_version,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


def backbone_features(pair: EncoderPair, x) -> np.ndarray:
    """Frozen student backbone features, unit-normalized per row."""
    feats, _ = forward(pair.student_backbone, x)
    return l2_normalize_rows(feats)


def feature_banks(pair: EncoderPair, data: Dataset) -> tuple[FeatureBank, FeatureBank]:
    train_bank = FeatureBank(backbone_features(pair, data.train_x), data.train_y)
    test_bank = FeatureBank(backbone_features(pair, data.test_x), data.test_y)
    return train_bank, test_bank


def raw_floor_knn(data: Dataset, k_eval: int) -> float:
    """KNN accuracy straight on the (normalized) raw inputs — the floor any
    learned representation should beat."""
    bank = bank_from_features(data.train_x, data.train_y)
    return knn_accuracy(bank, l2_normalize_rows(data.test_x), data.test_y, k_eval)


def _topk_indices(support: SupportSet, z_hat: np.ndarray, k: int) -> np.ndarray:
    """Vectorized cosine top-k for a batch of unit queries.

    Entries are stored oldest-first, so ordering by (descending similarity,
    ascending storage index) matches SupportSet.topk_neighbors exactly
    (tested). Uses rowwise_topk for the partial-sort fast path.
    """
    sims = z_hat @ support.embeddings.T  # (N, Q)
    return rowwise_topk(sims, k)


def _select_neighbors(
    support: SupportSet,
    z_hat: np.ndarray,
    labels: np.ndarray,
    k: int,
    strategy: str,
    rng: np.random.Generator,
):
    """Per-row neighbor embeddings for the batch: (N, k, C) plus shortfalls."""
    n = z_hat.shape[0]
    shortfalls = 0
    if strategy == "cosine":
        idx = _topk_indices(support, z_hat, k)
        return support.embeddings[idx], shortfalls
    rows = np.empty((n, k, support.dim))
    for i in range(n):
        if strategy == "random":
            ns = support.random_neighbors(k, rng, anchor=z_hat[i])
        elif strategy == "oracle":
            ns = support.oracle_neighbors(int(labels[i]), k, rng, anchor=z_hat[i])
            shortfalls += int(ns.oracle_shortfall)
        else:
            raise ValueError(f"unknown selection strategy {strategy!r}")
        rows[i] = ns.embeddings
    return rows, shortfalls


def _cas_weight_rows(neighbor_embeds: np.ndarray, q1_hat: np.ndarray, gamma: float) -> np.ndarray:
    """Vectorized CAS weights for a batch: (N, k+1) with column 0 = 1."""
    cos = np.clip(np.einsum("nkc,nc->nk", neighbor_embeds, q1_hat), -1.0, 1.0)
    e = np.exp(cos)
    soft = e / e.sum(axis=1, keepdims=True)
    return np.concatenate([np.ones((len(q1_hat), 1)), soft / gamma], axis=1)


def _weight_rows(resolved: ResolvedMethod, k_eff: int, neighbor_embeds, q1_hat, gamma: float):
    """Batch weight matrix/vector for the current scheme at k_eff neighbors."""
    if k_eff == 0:
        return np.array([1.0])
    if resolved.scheme_tag == "WSE":
        return weights_wse(k_eff)
    if resolved.scheme_tag == "MSE":
        return weights_mse(k_eff)
    return _cas_weight_rows(neighbor_embeds, q1_hat, gamma)


@dataclass
class DirectionResult:
    loss_rows: np.ndarray
    grads: list
    z_hat: np.ndarray
    p: np.ndarray
    targets: np.ndarray  # (N, k_eff, C) post-mix, pre-normalization
    weights: np.ndarray
    k_eff: int
    shortfalls: int


def _run_direction(
    pair: EncoderPair,
    x_student: np.ndarray,
    x_teacher: np.ndarray,
    labels: np.ndarray,
    support: SupportSet,
    resolved: ResolvedMethod,
    lam,
    select_rng: np.random.Generator,
    cas_gamma: float,
) -> DirectionResult:
    feats, tape_f = forward(pair.student_backbone, x_student)
    proj, tape_g = forward(pair.student_projector, feats)
    pred, tape_h = forward(pair.student_predictor, proj)

    tfeats, _ = forward(pair.teacher_backbone, x_teacher)
    tproj, _ = forward(pair.teacher_projector, tfeats)
    z_hat = l2_normalize_rows(tproj)

    n = z_hat.shape[0]
    k_eff = 0 if resolved.strategy == "none" else min(resolved.k, support.count)
    shortfalls = 0
    if k_eff > 0:
        neighbors, shortfalls = _select_neighbors(support, z_hat, labels, k_eff, resolved.strategy, select_rng)
        if resolved.mix.mode == "off":
            targets = neighbors
        else:
            lam_arr = np.asarray(lam, dtype=np.float64).reshape(1, -1, 1)
            targets = lam_arr * neighbors + (1.0 - lam_arr) * z_hat[:, None, :]
        q1_hat = l2_normalize_rows(proj) if resolved.scheme_tag == "CAS" else None
        weights = _weight_rows(resolved, k_eff, neighbors, q1_hat, cas_gamma)
    else:
        targets = np.empty((n, 0, z_hat.shape[1]))
        weights = np.array([1.0])

    loss_rows, d_pred = mnn_loss_batch(pred, z_hat, targets, weights)

    # Mean over the batch: scale the row gradients before backprop.
    gh, d_proj = backward(pair.student_predictor, tape_h, d_pred / n)
    gg, d_feats = backward(pair.student_projector, tape_g, d_proj)
    gf, _ = backward(pair.student_backbone, tape_f, d_feats)
    grads = gf + gg + gh

    return DirectionResult(
        loss_rows=loss_rows,
        grads=grads,
        z_hat=z_hat,
        p=pred,
        targets=targets,
        weights=np.asarray(weights),
        k_eff=k_eff,
        shortfalls=shortfalls,
    )


def probe_diagnostics(
    support: SupportSet,
    z_hat: np.ndarray,
    q1_hat: np.ndarray,
    anchor_labels: np.ndarray,
    k: int,
    strategy: str,
    rng: np.random.Generator,
    cas_gamma: float = 1.0,
) -> tuple[float, float, float]:
    """Mean (purity, CAS-weight entropy, order inconsistency) over a probe.

    Purity follows the method's own selection strategy; entropy and
    inconsistency always analyze the cosine-ordered top-k against its CAS
    weighting. Vectorized equivalent of the diagnostics ops (tested 1:1).
    """
    k_eff = min(k, support.count)
    if k_eff == 0:
        return float("nan"), float("nan"), float("nan")
    # Purity on the strategy's own neighbors.
    if strategy in ("cosine", "none"):
        sel_idx = _topk_indices(support, z_hat, k_eff)
    elif strategy == "random":
        sel_idx = np.stack([rng.choice(support.count, size=k_eff, replace=False) for _ in z_hat])
    elif strategy == "oracle":
        sel_idx = np.empty((len(z_hat), k_eff), dtype=np.intp)
        for i, lbl in enumerate(anchor_labels):
            cands = np.flatnonzero(support.labels == lbl)
            if len(cands) >= k_eff:
                sel_idx[i] = rng.choice(cands, size=k_eff, replace=False)
            else:
                sims = support.embeddings @ z_hat[i]
                order = np.argsort(-sims, kind="stable")
                pad = order[~np.isin(order, cands)][: k_eff - len(cands)]
                sel_idx[i] = np.concatenate([cands, pad])
    else:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    pur = float(np.mean(support.labels[sel_idx] == anchor_labels[:, None]))

    # Entropy and inconsistency on the cosine ordering vs its CAS weights.
    cos_idx = _topk_indices(support, z_hat, k_eff)
    nbr = support.embeddings[cos_idx]
    cas = _cas_weight_rows(nbr, q1_hat, cas_gamma)[:, 1:]
    q = cas / cas.sum(axis=1, keepdims=True)
    ent = float(np.mean(-np.sum(np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0), axis=1)))
    order = np.argsort(-cas, axis=1, kind="stable")
    cas_idx = np.take_along_axis(cos_idx, order, axis=1)
    inc = float(np.mean(cas_idx != cos_idx))
    return pur, ent, inc


def train(config: RunConfig, step_callback=None, verbose: bool = False) -> RunManifest:
    """Run one full training per the config; returns the manifest and writes
    manifest.json + checkpoint.npz under out_dir/run_id/."""
    t0 = time.perf_counter()
    resolved = resolve_method(config)
    run_id = run_id_for(config)

    data = generate_dataset(config.dataset, config.rng_seed)
    n_train = data.train_x.shape[0]
    if n_train < config.batch_size:
        raise ValueError("training set smaller than one batch")
    steps_per_epoch = n_train // config.batch_size
    schedule = LrSchedule(
        base_lr=config.scaled_lr,
        warmup_epochs=config.warmup_epochs,
        total_epochs=config.epochs,
        steps_per_epoch=steps_per_epoch,
    )

    ss = np.random.SeedSequence(config.rng_seed)
    init_rng, shuffle_rng, aug_rng, lam_rng, select_rng, probe_rng = (np.random.default_rng(s) for s in ss.spawn(6))

    pair = build_encoder_pair(config.dataset.ambient_dim, init_rng, momentum=config.momentum)
    support = SupportSet(dim=pair.student_projector.output_dim, capacity=config.support_capacity)
    params = pair.student_params()
    velocity = None

    pol_student = policy_for(config.aug_student)
    pol_teacher = policy_for(config.aug_teacher)

    floor = raw_floor_knn(data, config.eval.k_eval)
    train_bank, test_bank = feature_banks(pair, data)
    untrained = knn_accuracy(train_bank, test_bank.features, test_bank.labels, config.eval.k_eval)

    probe_idx = probe_rng.choice(n_train, size=min(config.probe_anchors, n_train), replace=False)
    probe_x, probe_y = data.train_x[probe_idx], data.train_y[probe_idx]

    metrics: dict[str, list] = {key: [] for key in EPOCH_METRIC_KEYS}
    shortfall_events = 0

    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n_train)
        epoch_losses = []
        lr = float("nan")
        for step in range(steps_per_epoch):
            gstep = epoch * steps_per_epoch + step
            idx = perm[step * config.batch_size : (step + 1) * config.batch_size]
            x, y = data.train_x[idx], data.train_y[idx]
            lr = lr_at(schedule, gstep)

            x_strong = augment_batch(x, pol_student, aug_rng)
            x_weak = augment_batch(x, pol_teacher, aug_rng)

            k_query = 0 if resolved.strategy == "none" else min(resolved.k, support.count)
            lam = draw_lambda(resolved.mix, lam_rng, k_query)

            dir_a = _run_direction(
                pair, x_strong, x_weak, y, support, resolved, lam, select_rng, config.cas_gamma
            )
            directions = [dir_a]
            if config.symmetric_loss:
                dir_b = _run_direction(
                    pair, x_weak, x_strong, y, support, resolved, lam, select_rng, config.cas_gamma
                )
                directions.append(dir_b)
            loss = float(np.mean([d.loss_rows.mean() for d in directions]))
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss at step {gstep} (epoch {epoch})")
            shortfall_events += sum(d.shortfalls for d in directions)

            scale = 1.0 / len(directions)
            grads = [scale * sum(d.grads[i] for d in directions) for i in range(len(params))]

            velocity = sgd_step(params, grads, lr, momentum=0.9, weight_decay=config.weight_decay, velocity=velocity)
            pair.bump_student_versions()
            ema_update(pair)
            support.refresh(dir_a.z_hat, labels=y)

            if step_callback is not None:
                step_callback(
                    {
                        "gstep": gstep,
                        "epoch": epoch,
                        "lr": lr,
                        "lam": lam,
                        "loss": loss,
                        "directions": directions,
                    }
                )
            epoch_losses.append(loss)

        tfeat, _ = forward(pair.teacher_backbone, probe_x)
        tproj, _ = forward(pair.teacher_projector, tfeat)
        sproj, _ = forward(pair.student_projector, forward(pair.student_backbone, probe_x)[0])
        pur, ent, inc = probe_diagnostics(
            support,
            l2_normalize_rows(tproj),
            l2_normalize_rows(sproj),
            probe_y,
            resolved.k,
            resolved.strategy,
            probe_rng,
            config.cas_gamma,
        )
        metrics["epoch"].append(epoch)
        metrics["loss_mean"].append(float(np.mean(epoch_losses)))
        metrics["lr"].append(lr)
        metrics["purity"].append(pur)
        metrics["entropy_mean"].append(ent)
        metrics["inconsistency_mean"].append(inc)
        if verbose:
            print(
                f"[{run_id}] epoch {epoch + 1}/{config.epochs} "
                f"loss {metrics['loss_mean'][-1]:.4f} purity {pur:.3f} lr {lr:.5f}"
            )

    run_dir = Path(config.out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = run_dir / CHECKPOINT_NAME
    save_checkpoint(
        checkpoint_path,
        pair,
        velocity,
        support,
        config,
        global_step=config.epochs * steps_per_epoch,
        rng_states={
            "shuffle": shuffle_rng.bit_generator.state,
            "aug": aug_rng.bit_generator.state,
            "lam": lam_rng.bit_generator.state,
            "select": select_rng.bit_generator.state,
            "probe": probe_rng.bit_generator.state,
        },
    )

    manifest = RunManifest(
        run_id=run_id,
        config=config_to_dict(config),
        epoch_metrics=metrics,
        knn_acc_untrained=untrained,
        knn_acc_raw_floor=floor,
        oracle_shortfall_events=shortfall_events,
        wall_clock_s=time.perf_counter() - t0,
        env=_env_stamp(),
        checkpoint_path=str(checkpoint_path),
    )
    manifest.save(run_dir / MANIFEST_NAME)
    return manifest


_NET_KEYS = ("f_s", "g_s", "h_s", "f_t", "g_t")


def _pair_nets(pair: EncoderPair):
    return {
        "f_s": pair.student_backbone,
        "g_s": pair.student_projector,
        "h_s": pair.student_predictor,
        "f_t": pair.teacher_backbone,
        "g_t": pair.teacher_projector,
    }


def save_checkpoint(path, pair: EncoderPair, velocity, support: SupportSet, config: RunConfig, global_step: int, rng_states: dict) -> None:
    """Versioned binary record: parameters, optimizer velocity, EMA teacher,
    support-set snapshot, rng states, and the resolved config."""
    arrays = {}
    for key, net in _pair_nets(pair).items():
        for i, p in enumerate(net.parameters()):
            arrays[f"{key}.{i}"] = p
    for i, v in enumerate(velocity or []):
        arrays[f"vel.{i}"] = v
    arrays["support.embeddings"] = support.embeddings
    arrays["support.labels"] = support.labels
    arrays["support.ages"] = support.ages
    meta = {
        "schema_version": SCHEMA_VERSION,
        "config": config_to_dict(config),
        "global_step": global_step,
        "support_next_age": support.next_age,
        "support_capacity": support.capacity,
        "support_dim": support.dim,
        "momentum": pair.momentum,
        "rng_states": rng_states,
        "velocity_count": len(velocity or []),
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Rebuild (pair, velocity, support, config, meta) from a checkpoint."""
    from .config import config_from_dict

    with np.load(path) as archive:
        meta = json.loads(bytes(archive["meta"]).decode())
        config = config_from_dict(meta["config"])
        pair = build_encoder_pair(config.dataset.ambient_dim, np.random.default_rng(0), momentum=meta["momentum"])
        for key, net in _pair_nets(pair).items():
            for i, p in enumerate(net.parameters()):
                p[...] = archive[f"{key}.{i}"]
            net.bump_version()
        velocity = [archive[f"vel.{i}"].copy() for i in range(meta["velocity_count"])]
        support = SupportSet(
            dim=meta["support_dim"],
            capacity=meta["support_capacity"],
            embeddings=archive["support.embeddings"].copy(),
            labels=archive["support.labels"].copy(),
            ages=archive["support.ages"].copy(),
            next_age=meta["support_next_age"],
        )
    return pair, velocity, support, config, meta


def evaluate(manifest_or_path) -> RunManifest:
    """KNN + linear-probe accuracy from a run's frozen checkpoint.

    Accepts a RunManifest or a path to manifest.json; fills knn_acc and
    probe_acc and rewrites the manifest file next to the checkpoint.
    """
    if isinstance(manifest_or_path, RunManifest):
        manifest = manifest_or_path
    else:
        manifest = RunManifest.load(manifest_or_path)
    if not manifest.checkpoint_path or not Path(manifest.checkpoint_path).exists():
        raise FileNotFoundError(f"checkpoint not found: {manifest.checkpoint_path}")
    pair, _, _, config, _ = load_checkpoint(manifest.checkpoint_path)
    data = generate_dataset(config.dataset, config.rng_seed)
    train_bank, test_bank = feature_banks(pair, data)
    manifest.knn_acc = knn_accuracy(train_bank, test_bank.features, test_bank.labels, config.eval.k_eval)
    manifest.probe_acc = linear_probe(train_bank, test_bank, config.eval.probe)
    manifest_path = Path(manifest.checkpoint_path).parent / MANIFEST_NAME
    if manifest_path.parent.exists():
        manifest.save(manifest_path)
    return manifest
