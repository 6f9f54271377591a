"""Command-line interface.

Subcommands: ``gen`` (synthetic dataset), ``train``, ``eval``, ``attnmap``
(attention heatmap export), ``ablate`` (the four-row component study).
Exit codes: 0 success, 2 argument error, 3 I/O failure, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import autodiff as ad
from .backbone import split_patches
from .errors import ConfigError, NanLossError
from .model import StructViT
from .pgmio import read_pgm, write_pgm
from .structure import aggregate_cls_attention, threshold
from .synthdata import generate, load_split, to_model_input
from .training import (TrainConfig, evaluate, model_from_checkpoint,
                       parse_config_file, train)

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

ABLATION_ROWS = (
    # (label, sil_layer_count, mfb, contrastive) in the canonical order
    ("baseline", 0, False, False),
    ("baseline+sil", 1, False, False),
    ("baseline+sil+mfb_no_cl", 3, True, False),
    ("baseline+sil+mfb", 3, True, True),
)


def _onoff(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="structvit",
        description="Structure-aware vision transformer: data generation, "
                    "training, evaluation, attention export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--train", type=int, default=1600, help="training images")
    p.add_argument("--test", type=int, default=400, help="test images")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="dataset directory (train/ + test/)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sil-layers", type=int, dest="sil_layers",
                   help="structure modules in the last k layers (0-3)")
    p.add_argument("--mfb", type=_onoff, help="multi-level feature fusion on/off")
    p.add_argument("--contrastive", type=_onoff, help="contrastive loss on/off")
    p.add_argument("--alpha", type=float, help="hard-negative margin (default 0.3)")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any other config field")
    p.add_argument("--log-every", type=int, default=0,
                   help="print progress every k steps (0 = quiet)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True,
                   help="split directory with manifest.tsv, or a dataset root "
                        "(its test/ split is used)")

    p = sub.add_parser("attnmap", help="export attention heatmaps for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PGM image")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix")

    p = sub.add_parser("ablate", help="train the four canonical configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=1, help="seeds per configuration")
    p.add_argument("--config", help="base config file")
    p.add_argument("--out", help="directory for per-run outputs (default: temp under data)")
    p.add_argument("--csv", help="also write the table to this CSV path")
    p.add_argument("--jobs", type=int, default=1,
                   help="run configurations in up to N parallel processes")
    return parser


def _apply_overrides(cfg_map: dict, args) -> dict:
    if args.sil_layers is not None:
        cfg_map["sil_layer_count"] = args.sil_layers
    if args.mfb is not None:
        cfg_map["mfb_enabled"] = args.mfb
    if args.contrastive is not None:
        cfg_map["contrastive_enabled"] = args.contrastive
    if args.alpha is not None:
        cfg_map["alpha"] = args.alpha
    if args.seed is not None:
        cfg_map["seed"] = args.seed
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg_map[key.strip()] = value.strip()
    return cfg_map


def cmd_gen(args) -> int:
    if args.classes < 2:
        raise ConfigError(f"--classes must be at least 2, got {args.classes}")
    if args.train < 1 or args.test < 1:
        raise ConfigError("--train and --test must be positive")
    summary = generate(args.seed, args.classes, args.train, args.test,
                       args.size, args.out)
    print(f"dataset written to {summary['out_dir']}")
    print(f"classes={summary['n_classes']} train={summary['n_train']} "
          f"test={summary['n_test']} size={summary['image_size']}")
    print(f"pixel-centroid baseline accuracy: {summary['centroid_accuracy']:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg_map = parse_config_file(args.config) if args.config else {}
    cfg = TrainConfig.from_mapping(_apply_overrides(cfg_map, args))
    result = train(cfg, args.data, args.out, log_every=args.log_every)
    print(f"finished {result.steps} steps; test accuracy {result.final_accuracy:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return EXIT_OK


def _resolve_split(data_dir: str) -> str:
    if os.path.exists(os.path.join(data_dir, "manifest.tsv")):
        return data_dir
    candidate = os.path.join(data_dir, "test")
    if os.path.exists(os.path.join(candidate, "manifest.tsv")):
        return candidate
    raise FileNotFoundError(f"no manifest.tsv under {data_dir}")


def cmd_eval(args) -> int:
    model, _ = model_from_checkpoint(args.ckpt)
    images, labels = load_split(_resolve_split(args.data))
    acc = evaluate(model, images, labels)
    print(f"test accuracy: {acc:.4f} ({len(images)} images)")
    return EXIT_OK


def _heatmap_bytes(values: np.ndarray, mean: float) -> np.ndarray:
    """Scale attention against twice its mean: the mean maps to mid-gray,
    kept-vs-dropped contrast is visible, and zeros stay black."""
    if mean <= 0.0:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = np.clip(values / (2.0 * mean), 0.0, 1.0)
    return (scaled * 255.0).round().astype(np.uint8)


def cmd_attnmap(args) -> int:
    model, _ = model_from_checkpoint(args.ckpt)
    if args.layer not in model.arch.sil_layers:
        raise ConfigError(
            f"layer {args.layer} has no captured attention; structure-equipped "
            f"layers are {list(model.arch.sil_layers) or 'none'}")
    image = read_pgm(args.image)
    patches = split_patches(to_model_input(image), model.grid)
    with ad.no_grad():
        fp = model.forward_image(patches, capture_layers={args.layer})
        fa = threshold(aggregate_cls_attention(fp.records[args.layer]))
    grid = model.grid
    raw = fa.total.data.reshape(grid.n_h, grid.n_w)
    kept = fa.filtered.data.reshape(grid.n_h, grid.n_w)
    raw_map = _heatmap_bytes(raw, fa.mean)
    kept_map = _heatmap_bytes(kept, fa.mean)
    if fa.mask.any():  # constant attention has no meaningful reference
        ry, rx = divmod(fa.reference_index, grid.n_w)
        raw_map[ry, rx] = 255
    raw_path = f"{args.out}_attention.pgm"
    kept_path = f"{args.out}_filtered.pgm"
    write_pgm(raw_path, raw_map)
    write_pgm(kept_path, kept_map)
    print(f"wrote {raw_path} and {kept_path} "
          f"({grid.n_h}x{grid.n_w}, reference patch {fa.reference_index})")
    return EXIT_OK


def _ablation_run(payload):
    label, cfg_dict, data_dir, out_dir = payload
    result = train(TrainConfig(**cfg_dict), data_dir, out_dir)
    return label, cfg_dict["seed"], result.final_accuracy


def run_ablation(base_cfg: TrainConfig, data_dir: str, out_root: str,
                 n_seeds: int, jobs: int = 1):
    """Train every canonical configuration for each seed; returns
    [(label, [acc per seed], mean)] in canonical row order."""
    tasks = []
    for label, sil, mfb, cl in ABLATION_ROWS:
        for s in range(n_seeds):
            cfg = dataclasses.replace(
                base_cfg, sil_layer_count=sil, mfb_enabled=mfb,
                contrastive_enabled=cl, seed=base_cfg.seed + s)
            out_dir = os.path.join(out_root, f"{label}_seed{cfg.seed}")
            tasks.append((label, dataclasses.asdict(cfg), data_dir, out_dir))
    if jobs > 1:
        import multiprocessing
        with multiprocessing.Pool(jobs) as pool:
            outcomes = pool.map(_ablation_run, tasks)
    else:
        outcomes = [_ablation_run(t) for t in tasks]
    by_label: dict[str, list] = {label: [] for label, *_ in ABLATION_ROWS}
    for label, seed, acc in outcomes:
        by_label[label].append((seed, acc))
    table = []
    for label, *_ in ABLATION_ROWS:
        accs = [acc for _, acc in sorted(by_label[label])]
        table.append((label, accs, sum(accs) / len(accs)))
    return table


def format_ablation_table(table) -> str:
    width = max(len(label) for label, *_ in table)
    lines = [f"{'configuration':<{width}}  mean_acc  per_seed"]
    for label, accs, mean in table:
        per_seed = ",".join(f"{a:.4f}" for a in accs)
        lines.append(f"{label:<{width}}  {mean:.4f}    {per_seed}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    cfg_map = parse_config_file(args.config) if args.config else {}
    base_cfg = TrainConfig.from_mapping(cfg_map)
    out_root = args.out or os.path.join(args.data, "ablation_runs")
    table = run_ablation(base_cfg, args.data, out_root, args.seeds,
                         jobs=max(1, args.jobs))
    print(format_ablation_table(table))
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("configuration,mean_acc,per_seed\n")
            for label, accs, mean in table:
                per_seed = ";".join(f"{a:.4f}" for a in accs)
                f.write(f"{label},{mean:.4f},{per_seed}\n")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "attnmap": cmd_attnmap,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NanLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
