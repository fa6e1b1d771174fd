"""Report emission: the fixed-schema metrics CSV, manifest JSON, and SVG plots.

For N manifests, emit_report writes metrics.csv, one manifest_<run_id>.json
per run, and a single report.svg with three panels (loss curve, purity vs
epoch, final-accuracy bars). Floats serialize via repr() so a parsed CSV
reproduces the in-memory series exactly and reruns are byte-identical.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .training import RunManifest

CSV_HEADER = (
    "run_id",
    "seed",
    "epoch",
    "loss_mean",
    "lr",
    "purity",
    "entropy_mean",
    "inconsistency_mean",
    "knn_acc",
    "probe_acc",
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_rows(manifest: RunManifest) -> list[dict]:
    """Per-epoch CSV rows; final accuracies appear only on the last row."""
    em = manifest.epoch_metrics
    seed = manifest.config.get("rng_seed")
    rows = []
    last = len(em["epoch"]) - 1
    for i, epoch in enumerate(em["epoch"]):
        rows.append(
            {
                "run_id": manifest.run_id,
                "seed": seed,
                "epoch": epoch,
                "loss_mean": em["loss_mean"][i],
                "lr": em["lr"][i],
                "purity": em["purity"][i],
                "entropy_mean": em["entropy_mean"][i],
                "inconsistency_mean": em["inconsistency_mean"][i],
                "knn_acc": manifest.knn_acc if i == last else None,
                "probe_acc": manifest.probe_acc if i == last else None,
            }
        )
    return rows


def write_metrics_csv(manifests, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for manifest in manifests:
            for row in metrics_rows(manifest):
                writer.writerow([_fmt(row[key]) for key in CSV_HEADER])
    return path


def read_metrics_csv(path) -> list[dict]:
    """Parse metrics.csv back into typed rows (floats via float(), '' -> None)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed: dict = {"run_id": row["run_id"], "seed": int(row["seed"]), "epoch": int(row["epoch"])}
            for key in CSV_HEADER[3:]:
                parsed[key] = float(row[key]) if row[key] != "" else None
            out.append(parsed)
    return out


def _plot_report(manifests, path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(15, 4))
    for manifest in manifests:
        em = manifest.epoch_metrics
        axes[0].plot(em["epoch"], em["loss_mean"], label=manifest.run_id)
        axes[1].plot(em["epoch"], em["purity"], label=manifest.run_id)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("mean loss")
    axes[0].set_title("training loss")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("neighbor purity")
    axes[1].set_title("probe purity")
    axes[1].set_ylim(0, 1)

    names = [m.run_id for m in manifests]
    knn = [m.knn_acc if m.knn_acc is not None else 0.0 for m in manifests]
    probe = [m.probe_acc if m.probe_acc is not None else 0.0 for m in manifests]
    xs = range(len(names))
    axes[2].bar([x - 0.2 for x in xs], knn, width=0.4, label="knn")
    axes[2].bar([x + 0.2 for x in xs], probe, width=0.4, label="probe")
    axes[2].set_xticks(list(xs))
    axes[2].set_xticklabels(names, rotation=45, ha="right", fontsize=6)
    axes[2].set_ylabel("top-1 accuracy")
    axes[2].set_title("final accuracy")
    axes[2].legend(fontsize=7)
    if len(manifests) <= 8:
        axes[0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def emit_report(manifests, out_dir) -> list[Path]:
    """Write metrics.csv, manifest_<run_id>.json per run, and report.svg.

    Returns the created paths. Raises on an unwritable directory.
    """
    manifests = list(manifests)
    if not manifests:
        raise ValueError("emit_report needs at least one manifest")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_metrics_csv(manifests, out / "metrics.csv")]
    for manifest in manifests:
        p = out / f"manifest_{manifest.run_id}.json"
        manifest.save(p)
        paths.append(p)
    paths.append(_plot_report(manifests, out / "report.svg"))
    return paths
