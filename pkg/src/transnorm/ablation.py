"""Ablation grids: cross products of config axes, each cell trained and scored.

A grid file is JSON::

    {
      "model": {"base_width": 8, "transformer": {"layers": 2}},
      "train": {"max_epochs": 20},
      "axes":  {"skip_count": [0, 1, 2, 3], "variant": ["transformer", "full"]},
      "seeds": [0, 1, 2]
    }

Axis names are ModelConfig or TrainConfig fields. Every combination of axis
values is run once per seed; the seed drives both weight init and batch order.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from transnorm.checkpoint import save_checkpoint
from transnorm.config import ModelConfig
from transnorm.errors import CheckpointError, ConfigError, NonFiniteError
from transnorm.metrics import dataset_report
from transnorm.model import TransNorm
from transnorm.tensor import Tensor
from transnorm.training import TrainConfig, fit

logger = logging.getLogger(__name__)

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
RESULT_COLUMNS = ("cell", "seed", "dsc", "ac", "best_epoch", "epochs", "status", "error")


@dataclass
class Grid:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    axes: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])

    @classmethod
    def from_dict(cls, data: dict) -> "Grid":
        unknown = set(data) - {"model", "train", "axes", "seeds"}
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
        grid = cls(
            dict(data.get("model", {})),
            dict(data.get("train", {})),
            dict(data.get("axes", {})),
            list(data.get("seeds", [0])),
        )
        for name, values in grid.axes.items():
            if name in ("seed",):
                raise ConfigError("use the top-level 'seeds' list instead of a 'seed' axis")
            if name not in MODEL_KEYS and name not in TRAIN_KEYS:
                raise ConfigError(f"grid axis {name!r} is neither a model nor a training field")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid axis {name!r} needs a non-empty list of values")
        if not grid.seeds:
            raise ConfigError("grid needs at least one seed")
        return grid

    def cells(self) -> list[dict]:
        """Axis assignments in row-major order of the axes as written."""
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*self.axes.values())]


@dataclass
class Cell:
    index: int
    values: dict
    seed: int
    model: dict
    train: dict


def expand(grid: Grid, data_shape: dict) -> list[Cell]:
    """Concrete per-cell configs; input geometry comes from the dataset."""
    for key, value in data_shape.items():
        if key in grid.model and grid.model[key] != value:
            raise ConfigError(f"grid sets {key}={grid.model[key]} but the dataset has {value}")
    out = []
    for index, values in enumerate(grid.cells()):
        for seed in grid.seeds:
            model = {**grid.model, **data_shape}
            train = dict(grid.train)
            for k, v in values.items():
                (model if k in MODEL_KEYS else train)[k] = v
            model["seed"] = seed
            train["seed"] = seed
            out.append(Cell(index, values, int(seed), model, train))
    return out


def score(model: TransNorm, images: np.ndarray, masks: np.ndarray, batch_size: int = 16) -> dict:
    preds = np.concatenate(
        [model.predict(Tensor(images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
    )
    return dataset_report(preds, masks, model.config.num_classes).mean


def run_cell(cell: Cell, train, val, out_dir: Path | None = None) -> dict:
    """Train one cell and score it on ``val``; failures become a row, not an exception."""
    row = {"cell": cell.index, **cell.values, "seed": cell.seed}
    start = time.perf_counter()
    try:
        model = TransNorm(ModelConfig.from_dict(cell.model))
        ckpt = fit(model, train, val, TrainConfig.from_dict(cell.train))
        mean = score(model, val.images, val.masks)
        row.update(
            dsc=mean["dsc"],
            ac=mean["acc"],
            best_epoch=ckpt.meta["best_epoch"],
            epochs=ckpt.meta["epochs_run"],
            status="ok",
            error="",
        )
        if out_dir is not None:
            cell_dir = Path(out_dir) / f"cell_{cell.index:03d}_seed_{cell.seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(cell_dir / "model.tnrm", ckpt)
    except (ConfigError, NonFiniteError, CheckpointError, ValueError, FloatingPointError) as exc:
        logger.error("cell %d seed %d failed: %s", cell.index, cell.seed, exc)
        row.update(dsc=None, ac=None, best_epoch=None, epochs=None, status="failed")
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["seconds"] = time.perf_counter() - start
    return row


def _run_cell_args(args):
    return run_cell(*args)


def worker_count(requested: int | None, cells: int) -> int:
    """Requested workers (default: the cap), capped by TRANSNORM_THREADS and the cell count."""
    env = os.environ.get("TRANSNORM_THREADS")
    try:
        cap = int(env) if env else None
    except ValueError:
        raise ConfigError(f"TRANSNORM_THREADS must be an integer, got {env!r}") from None
    n = requested if requested is not None else (cap or 1)
    if cap is not None:
        n = min(n, cap)
    return max(1, min(n, cells))


def run_grid(grid: Grid, train, val, out_dir=None, workers: int | None = None) -> list[dict]:
    """Run every cell; rows come back in grid order whatever the worker count."""
    shape = {
        "input_channels": int(train.images.shape[1]),
        "input_size": int(train.images.shape[2]),
        "num_classes": int(train.num_classes),
    }
    cells = expand(grid, shape)
    n = worker_count(workers, len(cells))
    jobs = [(cell, train, val, out_dir) for cell in cells]
    if n == 1:
        return [_run_cell_args(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_cell_args, jobs))


def _cell_text(value) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def results_csv(rows: list[dict], axes) -> str:
    """Deterministic CSV (timings excluded) with one row per cell and seed."""
    columns = ["cell", *axes, *RESULT_COLUMNS[1:]]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell_text(row.get(c)) for c in columns])
    return buf.getvalue()
