"""Optimizer, single training step, and the early-stopped fitting loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from transnorm.checkpoint import Checkpoint, checkpoint_from_model, load_model_state
from transnorm.errors import ConfigError, NonFiniteError
from transnorm.losses import segmentation_loss
from transnorm.tensor import GradTape, Tensor, backward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1 or self.lr < 0:
            raise ConfigError(f"invalid training config: {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params: dict[str, Tensor] = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    @classmethod
    def for_model(cls, model, config: TrainConfig) -> "Adam":
        return cls(
            model.named_parameters(),
            lr=config.lr,
            betas=(config.beta1, config.beta2),
            eps=config.eps,
            weight_decay=config.weight_decay,
        )

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v.copy() for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v.copy() for k, v in self.v.items()})
        out["adam.t"] = np.array([float(self.t)])
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        if "adam.t" not in tensors:
            return
        self.t = int(tensors["adam.t"][0])
        for k in self.params:
            self.m[k] = tensors[f"adam.m.{k}"].copy()
            self.v[k] = tensors[f"adam.v.{k}"].copy()


def train_step(model, optimizer: Adam, images: np.ndarray, masks: np.ndarray) -> float:
    """One forward/backward/Adam update on a batch; returns the loss value."""
    if not np.all(np.isfinite(images)):
        raise NonFiniteError("input batch contains NaN or Inf")
    model.train()
    model.zero_grad()
    with GradTape() as tape:
        logits, _ = model(Tensor(images))
        loss = segmentation_loss(logits, masks)
    value = loss.item()
    if not math.isfinite(value):
        node = tape.first_non_finite()
        where = f"output of '{node.op}' (tape node {tape.nodes.index(node)})" if node else "the loss"
        raise NonFiniteError(f"non-finite loss {value}; first non-finite tensor is the {where}")
    backward(loss)
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
    optimizer.step()
    return value


def evaluate_loss(model, images: np.ndarray, masks: np.ndarray, batch_size: int = 16) -> float:
    """Mean inference-mode loss, weighted by batch size."""
    model.eval()
    total = 0.0
    try:
        for start in range(0, len(images), batch_size):
            logits, _ = model(Tensor(images[start : start + batch_size]))
            n = len(logits.data)
            total += segmentation_loss(logits, masks[start : start + batch_size]).item() * n
    finally:
        model.train()
    return total / len(images)


class EarlyStopping:
    """Stop once the monitored value has not decreased for ``patience`` epochs."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def fit(
    model,
    train,
    val,
    config: TrainConfig = TrainConfig(),
    optimizer: Adam | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Train with early stopping on validation loss; return the best checkpoint.

    ``train`` and ``val`` are datasets exposing ``images`` and ``masks``
    arrays. The model is left holding the best-validation weights.
    """
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("fit needs non-empty train and validation sets")
    optimizer = optimizer or Adam.for_model(model, config)
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    history = []
    best = checkpoint_from_model(model, optimizer.t, optimizer)
    stopped_early = False
    for epoch in range(config.max_epochs):
        losses = [
            train_step(model, optimizer, train.images[idx], train.masks[idx])
            for idx in iterate_batches(len(train), config.batch_size, rng)
        ]
        val_loss = evaluate_loss(model, val.images, val.masks, config.batch_size)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        logger.info("epoch %d train %.5f val %.5f", epoch, row["train_loss"], val_loss)
        improved = val_loss < stopper.best
        stop = stopper.update(epoch, val_loss)
        if improved:
            best = checkpoint_from_model(model, optimizer.t, optimizer)
        if stop:
            stopped_early = True
            logger.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    best.meta = {
        "best_epoch": stopper.best_epoch,
        "best_val_loss": stopper.best,
        "epochs_run": len(history),
        "stopped_early": stopped_early,
        "history": history,
        "train": config.to_dict(),
    }
    load_model_state(model, best.tensors)
    return best
