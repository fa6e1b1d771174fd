"""Command-line entry point: generate / train / evaluate / sweep / report.

Precedence for run settings: built-in defaults, then a JSON config file
(--config), then explicit flags. Exit code 0 on success, 1 with a message
on stderr for any error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from ..objective import MixPolicy
from .config import (
    METHOD_TABLE,
    DatasetSpec,
    RunConfig,
    load_config,
)
from .dataset import generate_dataset
from .reporting import emit_report
from .sweeping import SWEEP_AXES, sweep
from .training import RunManifest, evaluate, raw_floor_knn, train


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file (flags override it)")
    parser.add_argument("--method", choices=sorted(METHOD_TABLE))
    parser.add_argument("--k", type=int)
    parser.add_argument("--support-capacity", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--warmup-epochs", type=int)
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--base-lr", type=float)
    parser.add_argument("--weight-decay", type=float)
    parser.add_argument("--mix-mode", choices=("uniform", "fixed"))
    parser.add_argument("--fixed-lambda", type=float)
    parser.add_argument("--mix-granularity", choices=("per_batch", "per_neighbor"))
    parser.add_argument("--augmentation", help="student/teacher strength, e.g. s/w")
    parser.add_argument("--asymmetric", action="store_true", help="single-direction loss")
    parser.add_argument("--k-eval", type=int)
    parser.add_argument("--probe-anchors", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--n-classes", type=int)
    parser.add_argument("--n-train", type=int)
    parser.add_argument("--n-test", type=int)
    parser.add_argument("--ambient-dim", type=int)
    parser.add_argument("--latent-dim", type=int)
    parser.add_argument("--spread", type=float)
    parser.add_argument("--map-seed", type=int)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()

    dataset_updates = {
        "n_classes": args.n_classes,
        "n_train": args.n_train,
        "n_test": args.n_test,
        "ambient_dim": args.ambient_dim,
        "latent_dim": args.latent_dim,
        "cluster_spread": args.spread,
        "map_seed": args.map_seed,
    }
    dataset = dataclasses.replace(
        config.dataset, **{k: v for k, v in dataset_updates.items() if v is not None}
    )

    mix = config.mix
    if args.mix_mode or args.fixed_lambda is not None or args.mix_granularity:
        mode = args.mix_mode or ("fixed" if args.fixed_lambda is not None else mix.mode)
        mix = MixPolicy(
            mode=mode,
            fixed_lambda=args.fixed_lambda if mode == "fixed" else None,
            granularity=args.mix_granularity or mix.granularity,
        )

    updates = {
        "dataset": dataset,
        "mix": mix,
        "method": args.method,
        "k": args.k,
        "support_capacity": args.support_capacity,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "warmup_epochs": args.warmup_epochs,
        "momentum": args.momentum,
        "base_lr": args.base_lr,
        "weight_decay": args.weight_decay,
        "probe_anchors": args.probe_anchors,
        "rng_seed": args.seed,
        "out_dir": args.out,
    }
    config = dataclasses.replace(config, **{k: v for k, v in updates.items() if v is not None})
    if args.augmentation:
        student, teacher = args.augmentation.split("/")
        tags = {"s": "strong", "w": "weak"}
        config = dataclasses.replace(config, aug_student=tags[student], aug_teacher=tags[teacher])
    if args.asymmetric:
        config = dataclasses.replace(config, symmetric_loss=False)
    if args.k_eval is not None:
        config = dataclasses.replace(
            config, eval=dataclasses.replace(config.eval, k_eval=args.k_eval)
        )
    return config


def _cmd_generate(args) -> int:
    config = _config_from_args(args)
    data = generate_dataset(config.dataset, config.rng_seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(
        out / "dataset.npz",
        train_x=data.train_x,
        train_y=data.train_y,
        test_x=data.test_x,
        test_y=data.test_y,
    )
    floor = raw_floor_knn(data, config.eval.k_eval)
    info = {
        "spec": dataclasses.asdict(config.dataset),
        "seed": config.rng_seed,
        "raw_input_knn_floor": floor,
    }
    (out / "dataset_info.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    print(f"dataset written to {out / 'dataset.npz'} (raw-input KNN floor {floor:.4f})")
    return 0


def _cmd_train(args) -> int:
    config = _config_from_args(args)
    manifest = train(config, verbose=not args.quiet)
    if not args.no_eval:
        manifest = evaluate(manifest)
        print(f"knn_acc {manifest.knn_acc:.4f}  probe_acc {manifest.probe_acc:.4f}")
    print(f"run {manifest.run_id} complete; manifest under {config.out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    manifest = evaluate(args.manifest)
    print(f"knn_acc {manifest.knn_acc:.4f}  probe_acc {manifest.probe_acc:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    config = _config_from_args(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    values: list = []
    for raw in args.values.split(","):
        try:
            values.append(json.loads(raw))
        except json.JSONDecodeError:
            values.append(raw)
    result = sweep(args.axis, values, config, seeds=seeds, out_dir=args.out, verbose=not args.quiet)
    print(f"sweep over {args.axis} complete: {result.table_path}")
    return 0


def _cmd_report(args) -> int:
    manifests = [RunManifest.load(p) for p in args.manifests]
    paths = emit_report(manifests, args.out or ".")
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write the synthetic dataset and its floor baseline")
    _add_config_flags(p_gen)
    p_gen.set_defaults(func=_cmd_generate)

    p_train = sub.add_parser("train", help="run one training per the config")
    _add_config_flags(p_train)
    p_train.add_argument("--no-eval", action="store_true", help="skip final KNN/probe evaluation")
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="KNN + probe accuracy from a saved run")
    p_eval.add_argument("manifest", type=Path, help="path to a run's manifest.json")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="ablation sweep over one axis")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--seeds", default="1,2,3", help="comma-separated run seeds")
    p_sweep.add_argument("--quiet", action="store_true")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_report = sub.add_parser("report", help="emit metrics.csv, manifests, and report.svg")
    p_report.add_argument("manifests", nargs="+", type=Path)
    p_report.add_argument("--out", help="output directory (default: current)")
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
