"""Synthetic segmentation data, binary PGM I/O and dataset directories.

On-disk layout::

    root/images/00000.pgm        (or 00000_r.pgm, _g, _b for 3 channels)
    root/masks/00000.pgm         class id = pixel value
    root/manifest.json           shapes, spec and split indices
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from transnorm.errors import ConfigError, FormatError

SHAPE_KINDS = ("ellipse", "rectangle", "ring")
CHANNEL_SUFFIXES = ("_r", "_g", "_b")
_CHANNEL_GAIN = (1.0, 0.9, 0.8)


@dataclass(frozen=True)
class SynthSpec:
    count: int = 200
    size: int = 64
    num_classes: int = 2
    channels: int = 1
    shapes: tuple[str, ...] = SHAPE_KINDS
    max_shapes: int = 3
    noise_std: float = 0.05
    contrast: float = 0.6
    overlap: bool = True
    fg_range: tuple[float, float] = (0.05, 0.60)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "fg_range", tuple(self.fg_range))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2 (background + 1), got {self.num_classes}")
        if self.size < 16:
            raise ConfigError(f"image size must be >= 16, got {self.size}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if not self.shapes or set(self.shapes) - set(SHAPE_KINDS):
            raise ConfigError(f"shapes must be a non-empty subset of {SHAPE_KINDS}")
        lo, hi = self.fg_range
        if not 0 < lo < hi <= 1:
            raise ConfigError(f"fg_range must satisfy 0 < lo < hi <= 1, got {self.fg_range}")
        if not 0 <= self.contrast <= 1 or self.noise_std < 0 or self.max_shapes < 1:
            raise ConfigError("contrast must be in [0, 1], noise_std >= 0, max_shapes >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        d["fg_range"] = list(self.fg_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class Sample:
    image: np.ndarray  # C x H x W in [0, 1]
    mask: np.ndarray  # H x W class ids


@dataclass
class SegmentationDataset:
    images: np.ndarray  # N x C x H x W float64
    masks: np.ndarray  # N x H x W int64
    num_classes: int = 2
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i])

    def subset(self, indices) -> "SegmentationDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SegmentationDataset(self.images[idx], self.masks[idx], self.num_classes, dict(self.meta))


# ---------------------------------------------------------------- generation


def _shape_mask(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    a, b = rng.uniform(0.08, 0.3, size=2) * size
    theta = rng.uniform(0.0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    if kind == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    outer = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "ellipse":
        return outer
    inner_frac = rng.uniform(0.45, 0.7)
    inner = (u / (a * inner_frac)) ** 2 + (v / (b * inner_frac)) ** 2 <= 1.0
    return outer & ~inner


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth background in [0, 0.3]: two random plane waves."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    t = np.full((size, size), 0.15)
    for _ in range(2):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0.0, 2 * math.pi)
        t += 0.075 * np.sin(2 * math.pi * (fy * yy + fx * xx) + phase)
    return t


def _draw_mask(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.fg_range
    for _ in range(200):
        mask = np.zeros((spec.size, spec.size), dtype=np.int64)
        for _ in range(int(rng.integers(1, spec.max_shapes + 1))):
            kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
            cls = int(rng.integers(1, spec.num_classes))
            shape = _shape_mask(kind, rng, spec.size)
            if not spec.overlap and np.any(shape & (mask > 0)):
                continue
            mask[shape] = cls
        frac = np.count_nonzero(mask) / mask.size
        if lo <= frac <= hi:
            return mask
    raise ConfigError(f"could not draw a mask with foreground fraction in {spec.fg_range}")


def generate_sample(spec: SynthSpec, index: int) -> Sample:
    """Sample ``index`` of the dataset described by ``spec``; independent of other indices."""
    rng = np.random.default_rng([spec.seed, index])
    mask = _draw_mask(spec, rng)
    texture = _texture(rng, spec.size)
    level = 0.5 + 0.5 * mask / (spec.num_classes - 1)
    value = np.where(mask > 0, (1.0 - spec.contrast) * texture + spec.contrast * level, texture)
    image = np.empty((spec.channels, spec.size, spec.size))
    for c in range(spec.channels):
        plane = value * (_CHANNEL_GAIN[c] if spec.channels == 3 else 1.0)
        if spec.noise_std > 0:
            plane = plane + rng.normal(0.0, spec.noise_std, size=plane.shape)
        # stored as 8-bit so in-memory and on-disk datasets are identical
        image[c] = np.round(np.clip(plane, 0.0, 1.0) * 255.0) / 255.0
    return Sample(image, mask)


def generate(spec: SynthSpec) -> SegmentationDataset:
    """Deterministic synthetic dataset; each sample uses its own derived seed."""
    samples = [generate_sample(spec, i) for i in range(spec.count)]
    return SegmentationDataset(
        np.stack([s.image for s in samples]),
        np.stack([s.mask for s in samples]),
        spec.num_classes,
        {"spec": spec.to_dict()},
    )


# ---------------------------------------------------------------- splitting


def split_indices(n: int, fractions, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    for name, frac, part in zip(("train", "val", "test"), fractions, parts):
        if frac > 0 and len(part) == 0:
            raise ConfigError(f"{name} split is empty for n={n} and fractions {fractions}")
    return parts


def split(dataset: SegmentationDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint, exhaustive, seeded partition into (train, val, test)."""
    return tuple(dataset.subset(idx) for idx in split_indices(len(dataset), fractions, seed))


# ---------------------------------------------------------------- PGM


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D array of integers in [0, 255] as binary P5 with maxval 255."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise FormatError(f"PGM holds a single 2-D plane, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.all(arr == np.round(arr))):
        raise FormatError("PGM pixel values must be integers in [0, 255]")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(np.uint8).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM (maxval 255) into a uint8 array of shape (H, W)."""
    buf = Path(path).read_bytes()
    pos = 0
    tokens = []
    for what in ("magic", "width", "height", "maxval"):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{path}: missing {what} at byte offset {pos}")
        tokens.append((m.group(1), m.start(1)))
        pos = m.end(1)
        if what == "magic":
            if m.group(1) == b"P2":
                raise FormatError(f"{path}: ASCII PGM (P2) is not supported, expected binary P5 at byte offset 0")
            if m.group(1) != b"P5":
                raise FormatError(f"{path}: bad magic {m.group(1)!r} at byte offset {m.start(1)}, expected b'P5'")
    values = []
    for (tok, offset), what in zip(tokens[1:], ("width", "height", "maxval")):
        if not tok.isdigit():
            raise FormatError(f"{path}: {what} {tok!r} at byte offset {offset} is not a decimal integer")
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} at byte offset {tokens[3][1]} unsupported, expected 255")
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError(f"{path}: expected one whitespace byte after maxval at byte offset {pos}")
    pos += 1
    need = width * height
    if len(buf) - pos != need:
        raise FormatError(
            f"{path}: expected {need} pixel bytes from byte offset {pos}, found {len(buf) - pos}"
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(height, width).copy()


# ---------------------------------------------------------------- dataset directories


def _to_u8(plane: np.ndarray) -> np.ndarray:
    return np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_dataset(root, dataset: SegmentationDataset, splits: dict | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    channels = dataset.images.shape[1]
    for i in range(len(dataset)):
        stem = f"{i:05d}"
        if channels == 1:
            write_pgm(root / "images" / f"{stem}.pgm", _to_u8(dataset.images[i, 0]))
        else:
            for c, suffix in enumerate(CHANNEL_SUFFIXES):
                write_pgm(root / "images" / f"{stem}{suffix}.pgm", _to_u8(dataset.images[i, c]))
        write_pgm(root / "masks" / f"{stem}.pgm", dataset.masks[i])
    manifest = {
        "count": len(dataset),
        "size": int(dataset.images.shape[2]),
        "channels": int(channels),
        "num_classes": int(dataset.num_classes),
        "splits": {k: [int(v) for v in idx] for k, idx in (splits or {}).items()},
    }
    manifest.update({k: v for k, v in dataset.meta.items() if k not in manifest})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_image(path, channels: int | None = None) -> np.ndarray:
    """Load an image as (C, H, W) floats in [0, 1] from a PGM or its _r/_g/_b planes."""
    path = Path(path)
    if path.exists() and channels in (None, 1):
        return read_pgm(path)[None].astype(np.float64) / 255.0
    planes = [path.with_name(path.stem + s + path.suffix) for s in CHANNEL_SUFFIXES]
    if all(p.exists() for p in planes) and channels in (None, 3):
        return np.stack([read_pgm(p) for p in planes]).astype(np.float64) / 255.0
    raise FormatError(f"{path}: no readable image (looked for the file and its _r/_g/_b planes)")


def load_dataset(root) -> tuple[SegmentationDataset, dict[str, np.ndarray]]:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root}/manifest.json: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    n, channels = manifest["count"], manifest["channels"]
    images = np.stack([read_image(root / "images" / f"{i:05d}.pgm", channels) for i in range(n)])
    masks = np.stack([read_pgm(root / "masks" / f"{i:05d}.pgm").astype(np.int64) for i in range(n)])
    meta = {k: v for k, v in manifest.items() if k not in ("count", "size", "channels", "num_classes", "splits")}
    dataset = SegmentationDataset(images, masks, manifest["num_classes"], meta)
    splits = {k: np.asarray(v, dtype=np.int64) for k, v in manifest.get("splits", {}).items()}
    return dataset, splits
