"""Binary tensor files and model checkpoints.

Layout (all integers little-endian)::

    b"TNRM"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 tensor_count
    per tensor: u32 name_len  name (UTF-8)  u32 rank  rank x u64 dims  float64 data

The whole shape table is validated before any tensor data is read.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from transnorm.config import ModelConfig
from transnorm.errors import CheckpointError, ConfigError
from transnorm.layers import Module

MAGIC = b"TNRM"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config)


# ---------------------------------------------------------------- model state


def model_state(model: Module) -> dict[str, np.ndarray]:
    """Parameters and batch-norm statistics, keyed by dotted attribute path."""
    state = {name: p.data.copy() for name, p in model.named_parameters()}
    for name, bn in model.named_bn_states():
        state[f"{name}.running_mean"] = bn.running_mean.copy()
        state[f"{name}.running_var"] = bn.running_var.copy()
        state[f"{name}.num_batches"] = np.array([float(bn.num_batches)])
    return state


def state_shapes(model: Module) -> dict[str, tuple[int, ...]]:
    shapes = {name: p.shape for name, p in model.named_parameters()}
    for name, bn in model.named_bn_states():
        c = bn.running_mean.shape
        shapes.update({f"{name}.running_mean": c, f"{name}.running_var": c, f"{name}.num_batches": (1,)})
    return shapes


def load_model_state(model: Module, state: dict[str, np.ndarray]) -> None:
    expected = state_shapes(model)
    missing = sorted(set(expected) - set(state))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {missing[:5]}")
    for name, shape in expected.items():
        if state[name].shape != shape:
            raise CheckpointError(f"tensor {name!r} has shape {state[name].shape}, model expects {shape}")
    for name, p in model.named_parameters():
        p.data = state[name].astype(np.float64, copy=True)
    for name, bn in model.named_bn_states():
        bn.running_mean = state[f"{name}.running_mean"].copy()
        bn.running_var = state[f"{name}.running_var"].copy()
        bn.num_batches = int(state[f"{name}.num_batches"][0])


def checkpoint_from_model(model, step: int = 0, optimizer=None, meta: dict | None = None) -> Checkpoint:
    tensors = model_state(model)
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    return Checkpoint(model.config.to_dict(), tensors, step, dict(meta or {}))


def model_from_checkpoint(ckpt: Checkpoint):
    from transnorm.model import TransNorm

    try:
        model = TransNorm(ckpt.model_config)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from None
    load_model_state(model, ckpt.tensors)
    return model


# ---------------------------------------------------------------- tensor files


def write_tensor_file(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Serialize atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    chunks = [MAGIC, _U32.pack(VERSION)]
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks += [_U32.pack(len(text)), text, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks += [_U32.pack(len(encoded)), encoded, _U32.pack(arr.ndim)]
        chunks += [_U64.pack(d) for d in arr.shape]
        chunks.append(np.ascontiguousarray(arr).tobytes())
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated file: need {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} remain"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def read_tensor_file(path, expected=None, optional_prefix: str | None = None):
    """Return ``(header, tensors)``.

    ``expected`` maps allowed tensor names to shapes, or is a callable that
    builds that map from the parsed header. Names starting with
    ``optional_prefix`` may be absent; all others must be present.
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version} at offset 4 (this build reads {VERSION})")
    n = r.u32("header length")
    at = r.pos
    try:
        header = json.loads(r.take(n, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header JSON at offset {at}: {exc}") from None
    if callable(expected):
        expected = expected(header)
    count = r.u32("tensor count")

    # pass 1: shape table only
    table = []
    for i in range(count):
        at = r.pos
        name_len = r.u32(f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i} name at offset {at} is not UTF-8") from None
        rank = r.u32(f"rank of {name!r}")
        if rank > 8:
            raise CheckpointError(f"tensor {name!r} at offset {at} has implausible rank {rank}")
        shape = tuple(r.u64(f"dims of {name!r}") for _ in range(rank))
        if expected is not None:
            if name not in expected:
                raise CheckpointError(f"unexpected tensor {name!r} at offset {at}")
            if shape != tuple(expected[name]):
                raise CheckpointError(
                    f"tensor {name!r} at offset {at} has shape {shape}, expected {tuple(expected[name])}"
                )
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        r.take(nbytes, f"data of {name!r}")
        table.append((name, shape, r.pos - nbytes))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}")
    if expected is not None:
        present = {name for name, _, _ in table}
        missing = sorted(
            k for k in expected
            if k not in present and not (optional_prefix and k.startswith(optional_prefix))
        )
        if missing:
            raise CheckpointError(f"file is missing tensors: {missing[:5]}")

    # pass 2: data
    tensors = {}
    for name, shape, offset in table:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
        tensors[name] = arr.astype(np.float64).reshape(shape)
    return header, tensors


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {"kind": "checkpoint", "config": ckpt.config, "step": ckpt.step, "meta": ckpt.meta}
    write_tensor_file(path, header, ckpt.tensors)


def _checkpoint_table(header: dict) -> dict[str, tuple[int, ...]]:
    from transnorm.model import TransNorm

    if header.get("kind") != "checkpoint":
        raise CheckpointError("file is a tensor file, not a checkpoint")
    try:
        model = TransNorm(ModelConfig.from_dict(header["config"]))
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"header does not hold a valid model config ({exc})") from None
    table = state_shapes(model)
    for name, p in model.named_parameters():
        table[f"adam.m.{name}"] = p.shape
        table[f"adam.v.{name}"] = p.shape
    table["adam.t"] = (1,)
    return table


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint, checking every tensor against the stored config."""
    header, tensors = read_tensor_file(path, _checkpoint_table, optional_prefix="adam.")
    return Checkpoint(header["config"], tensors, int(header.get("step", 0)), header.get("meta", {}))
