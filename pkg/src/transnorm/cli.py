"""Command-line entry point: ``transnorm {generate,train,eval,infer,ablate}``.

Exit codes: 0 ok, 2 bad input or config, 3 numeric failure, 4 checkpoint or
config incompatibility. Every command writes a JSON run manifest next to its
main output recording configs, seeds, version, results and timings.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from transnorm import __version__
from transnorm.ablation import Grid, results_csv, run_grid, score
from transnorm.checkpoint import (
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    write_tensor_file,
)
from transnorm.config import ModelConfig
from transnorm.data import SynthSpec, generate, load_dataset, read_image, save_dataset, split_indices, write_pgm
from transnorm.errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    FormatError,
    NonFiniteError,
    UninitializedStatisticsError,
)
from transnorm.metrics import dataset_report
from transnorm.model import TransNorm
from transnorm.tensor import Tensor
from transnorm.training import Adam, TrainConfig, fit
from transnorm.transformer import resize_spatial_map, spatial_map_of

logger = logging.getLogger("transnorm")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4


class CompatibilityError(Exception):
    """Checkpoint and data (or image) do not fit together."""


@dataclass
class RunManifest:
    command: str
    argv: list
    seed: int | None
    version: str
    config: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable))


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object at the top level")
    return data


def _data_shape(dataset) -> dict:
    return {
        "input_channels": int(dataset.images.shape[1]),
        "input_size": int(dataset.images.shape[2]),
        "num_classes": int(dataset.num_classes),
    }


def _splits(dataset, splits: dict, seed: int) -> dict:
    if all(len(splits.get(k, ())) for k in ("train", "val")):
        return splits
    return dict(zip(("train", "val", "test"), split_indices(len(dataset), (0.8, 0.1, 0.1), seed)))


def _predict(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    return np.concatenate(
        [model.predict(Tensor(images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
    )


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    start = time.perf_counter()
    spec_dict = read_json(args.spec) if args.spec else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_dict)
    dataset = generate(spec)
    parts = dict(zip(("train", "val", "test"), split_indices(len(dataset), args.split, spec.seed)))
    out = Path(args.out)
    save_dataset(out, dataset, parts)
    print(f"wrote {len(dataset)} samples to {out}")
    RunManifest(
        "generate",
        sys.argv[1:],
        spec.seed,
        version_string(),
        {"spec": spec.to_dict(), "split": list(args.split)},
        {"count": len(dataset), "splits": {k: len(v) for k, v in parts.items()}},
        {"total_s": time.perf_counter() - start},
    ).write(out / "run_manifest.json")
    return EXIT_OK


def _train_configs(args, dataset) -> tuple[ModelConfig, TrainConfig]:
    cfg = read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ConfigError(f"{args.config}: unknown top-level keys {sorted(unknown)} (expected model, train)")
    model = dict(cfg.get("model", {}))
    train = dict(cfg.get("train", {}))
    for key, value in _data_shape(dataset).items():
        if key in model and model[key] != value:
            raise ConfigError(f"config sets {key}={model[key]} but the dataset has {value}")
        model[key] = value
    if args.seed is not None:
        model["seed"] = train["seed"] = args.seed
    return ModelConfig.from_dict(model), TrainConfig.from_dict(train)


def cmd_train(args) -> int:
    start = time.perf_counter()
    dataset, splits = load_dataset(args.data)
    model_cfg, train_cfg = _train_configs(args, dataset)
    splits = _splits(dataset, splits, train_cfg.seed)
    train, val = dataset.subset(splits["train"]), dataset.subset(splits["val"])
    out = Path(args.out)

    optimizer = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.model_config != model_cfg:
            raise CompatibilityError(f"{args.resume} was trained with a different model config")
        model = model_from_checkpoint(ckpt)
        optimizer = Adam.for_model(model, train_cfg)
        optimizer.load_state_tensors(ckpt.tensors)
    else:
        model = TransNorm(model_cfg)

    log_path = Path(str(out) + ".epochs.csv")
    with log_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])

        def on_epoch(row):
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])
            fh.flush()

        ckpt = fit(model, train, val, train_cfg, optimizer=optimizer, on_epoch=on_epoch)
    meta = ckpt.meta
    if meta["stopped_early"]:
        message = f"early stop at epoch {meta['epochs_run'] - 1} (best epoch {meta['best_epoch']})"
        logger.info(message)
        print(message)
    save_checkpoint(out, ckpt)
    print(f"best val loss {meta['best_val_loss']:.6f} at epoch {meta['best_epoch']}; checkpoint {out}")
    RunManifest(
        "train",
        sys.argv[1:],
        train_cfg.seed,
        version_string(),
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": str(args.data),
         "splits": {k: len(v) for k, v in splits.items()}, "resume": args.resume},
        {k: meta[k] for k in ("best_epoch", "best_val_loss", "epochs_run", "stopped_early")},
        {"total_s": time.perf_counter() - start},
    ).write(str(out) + ".manifest.json")
    return EXIT_OK


def _check_fits(config: ModelConfig, dataset) -> None:
    shape = _data_shape(dataset)
    have = {k: getattr(config, k) for k in shape}
    if have != shape:
        raise CompatibilityError(f"checkpoint expects {have}, data provides {shape}")


def cmd_eval(args) -> int:
    start = time.perf_counter()
    dataset, splits = load_dataset(args.data)
    idx = splits.get(args.split)
    subset = dataset.subset(idx) if idx is not None and len(idx) else dataset
    if args.oracle:
        preds = subset.masks
        config = {"oracle": True}
    else:
        if not args.ckpt:
            raise ConfigError("eval needs --ckpt (or --oracle to score the ground truth against itself)")
        ckpt = load_checkpoint(args.ckpt)
        model = model_from_checkpoint(ckpt)
        _check_fits(model.config, subset)
        preds = _predict(model, subset.images)
        config = {"model": ckpt.config, "ckpt": str(args.ckpt)}
    report = dataset_report(preds, subset.masks, subset.num_classes, args.percentile)
    report_path = Path(args.report)
    report_path.write_text(report.to_csv())
    json_path = Path(args.json) if args.json else report_path.with_suffix(".json")
    json_path.write_text(report.to_json())
    mean = report.mean
    print(f"{len(subset)} images; mean dsc {mean['dsc']} acc {mean['acc']} hd {mean['hd']}")
    RunManifest(
        "eval",
        sys.argv[1:],
        None,
        version_string(),
        {**config, "data": str(args.data), "split": args.split, "percentile": args.percentile},
        {"rows": report.rows(), "counts": report.counts},
        {"total_s": time.perf_counter() - start},
    ).write(str(report_path) + ".manifest.json")
    return EXIT_OK


def cmd_infer(args) -> int:
    try:
        image = read_image(args.image)
    except OSError as exc:
        raise FormatError(f"cannot read image {args.image}: {exc.strerror}") from None
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    cfg = model.config
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if image.shape != expected:
        raise DimensionError(f"image {args.image} has shape {image.shape}, model expects {expected}")
    model.eval()
    logits, record = model(Tensor(image[None]))
    mask = logits.data.argmax(axis=1)[0]
    write_pgm(args.out, mask)
    print(f"wrote mask {args.out} with classes {sorted(int(c) for c in np.unique(mask))}")
    if args.attn:
        ws = spatial_map_of(record)
        full = resize_spatial_map(ws, cfg.input_size // ws.shape[-1]).data
        out_dir = Path(args.attn)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_pgm(out_dir / "ws.pgm", np.round(255.0 * full[0, 0]))
        if args.raw:
            write_tensor_file(out_dir / "ws.tnrm", {"kind": "spatial_map"}, {"ws": ws.data, "ws_input": full})
        print(f"wrote attention map to {out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    start = time.perf_counter()
    grid = Grid.from_dict(read_json(args.grid))
    dataset, splits = load_dataset(args.data)
    splits = _splits(dataset, splits, 0)
    train, val = dataset.subset(splits["train"]), dataset.subset(splits["val"])
    out = Path(args.out)
    cells_dir = out.parent / (out.stem + "_cells")
    rows = run_grid(grid, train, val, cells_dir, args.workers)
    out.write_text(results_csv(rows, list(grid.axes)))
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} cells, {len(failed)} failed; results in {out}")
    RunManifest(
        "ablate",
        sys.argv[1:],
        None,
        version_string(),
        {"grid": asdict(grid), "data": str(args.data)},
        {"rows": rows},
        {"total_s": time.perf_counter() - start, "cells_s": [r["seconds"] for r in rows]},
    ).write(str(out) + ".manifest.json")
    if not failed:
        return EXIT_OK
    numeric = any(r["error"].startswith("NonFiniteError") for r in failed)
    return EXIT_NUMERIC if numeric else EXIT_INPUT


# ---------------------------------------------------------------- parser


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated fractions, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated fractions, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transnorm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--spec", help="SynthSpec JSON (defaults for missing keys)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--split", type=_fractions, default=(0.8, 0.1, 0.1), help="train,val,test fractions")
    p.add_argument("--seed", type=int, help="overrides the spec seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train with early stopping and write the best checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help='JSON with optional "model" and "train" objects')
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from (weights and optimizer state)")
    p.add_argument("--seed", type=int, help="overrides model and training seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--report", required=True, help="CSV report path")
    p.add_argument("--json", help="JSON report path (default: report path with .json)")
    p.add_argument("--split", default="test", help="split name from the dataset manifest")
    p.add_argument("--percentile", type=float, help="report this Hausdorff percentile (e.g. 95)")
    p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a mask for one image")
    p.add_argument("--image", required=True, help="PGM image (or stem of _r/_g/_b planes)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="mask PGM path")
    p.add_argument("--attn", help="directory for the spatial attention heatmap")
    p.add_argument("--raw", action="store_true", help="also write the unquantized map as a tensor file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", required=True, help="grid JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--workers", type=int, help="parallel cells (capped by TRANSNORM_THREADS)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, CompatibilityError, UninitializedStatisticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (ConfigError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
