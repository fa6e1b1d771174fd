"""Ablation sweeps: one axis, several values, shared seeds per point."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from ..objective import MixPolicy
from .config import RunConfig
from .training import RunManifest, evaluate, train

SWEEP_AXES = ("k", "support_size", "augmentation", "strategy", "lambda", "weight_scheme")

# Selection strategies and weight schemes ride on the method table.
_STRATEGY_METHODS = {"cosine": "mnn", "random": "mnn_random", "oracle": "mnn_oracle"}
_SCHEME_METHODS = {"wse": "mnn", "mse": "msf", "cas": "mnn_cas"}


def apply_axis(base: RunConfig, axis: str, value) -> RunConfig:
    """A copy of the base config with one axis value applied."""
    if axis == "k":
        return dataclasses.replace(base, k=int(value))
    if axis == "support_size":
        return dataclasses.replace(base, support_capacity=int(value))
    if axis == "augmentation":
        student, teacher = str(value).split("/")
        tags = {"s": "strong", "w": "weak"}
        return dataclasses.replace(base, aug_student=tags[student], aug_teacher=tags[teacher])
    if axis == "strategy":
        return dataclasses.replace(base, method=_STRATEGY_METHODS[str(value)])
    if axis == "lambda":
        return dataclasses.replace(base, mix=MixPolicy(mode="fixed", fixed_lambda=float(value)))
    if axis == "weight_scheme":
        return dataclasses.replace(base, method=_SCHEME_METHODS[str(value)])
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


@dataclass
class SweepResult:
    axis: str
    rows: list[dict]
    manifests: list[RunManifest]
    table_path: Path | None = None
    plot_path: Path | None = None


def _write_table(rows, path) -> Path:
    header = ["axis", "value", "seed", "run_id", "knn_acc", "probe_acc", "final_purity"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    return Path(path)


def _plot_sweep(axis, rows, path) -> Path:
    values = sorted({row["value"] for row in rows}, key=lambda v: str(v))
    mean = lambda key, v: sum(r[key] for r in rows if r["value"] == v) / max(
        1, sum(1 for r in rows if r["value"] == v)
    )
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    xs = range(len(values))
    axes[0].plot(xs, [mean("knn_acc", v) for v in values], marker="o", label="knn")
    axes[0].plot(xs, [mean("probe_acc", v) for v in values], marker="s", label="probe")
    axes[0].set_ylabel("top-1 accuracy")
    axes[0].legend()
    axes[1].plot(xs, [mean("final_purity", v) for v in values], marker="o", color="tab:green")
    axes[1].set_ylabel("final-epoch purity")
    axes[1].set_ylim(0, 1)
    for ax in axes:
        ax.set_xticks(list(xs))
        ax.set_xticklabels([str(v) for v in values])
        ax.set_xlabel(axis)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def sweep(
    axis: str,
    values,
    base_config: RunConfig,
    seeds=(1, 2, 3),
    out_dir=None,
    verbose: bool = False,
) -> SweepResult:
    """Train + evaluate every (value, seed) point and emit a comparison table
    and line plots. A failing member run aborts the sweep; results gathered
    so far are still written before the error propagates."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    out = Path(out_dir) if out_dir is not None else Path(base_config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    manifests: list[RunManifest] = []
    try:
        for value in values:
            for seed in seeds:
                config = dataclasses.replace(
                    apply_axis(base_config, axis, value), rng_seed=seed, out_dir=str(out)
                )
                manifest = evaluate(train(config, verbose=verbose))
                manifests.append(manifest)
                rows.append(
                    {
                        "axis": axis,
                        "value": value,
                        "seed": seed,
                        "run_id": manifest.run_id,
                        "knn_acc": manifest.knn_acc,
                        "probe_acc": manifest.probe_acc,
                        "final_purity": manifest.epoch_metrics["purity"][-1],
                    }
                )
    except Exception:
        if rows:
            _write_table(rows, out / f"sweep_{axis}_partial.csv")
        raise
    table = _write_table(rows, out / f"sweep_{axis}.csv")
    plot = _plot_sweep(axis, rows, out / f"sweep_{axis}.svg")
    return SweepResult(axis=axis, rows=rows, manifests=manifests, table_path=table, plot_path=plot)
