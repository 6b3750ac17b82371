"""Central finite differences, used as the independent gradient oracle."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from transnorm.errors import ContractError
from transnorm.tensor.core import Tensor


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def fd_gradient(
    f: Callable[[Tensor], object],
    x: Tensor,
    step: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    ``x.data`` is perturbed in place and restored after every coordinate.
    With ``indices`` only those coordinates are evaluated and a 1-D array in
    the same order is returned; otherwise the full same-shape gradient.
    """
    if step <= 0:
        raise ContractError(f"fd_gradient: step must be positive, got {step}")
    data = x.data
    coords = list(np.ndindex(data.shape)) if indices is None else [tuple(i) for i in indices]
    out = np.empty(len(coords))
    for n, idx in enumerate(coords):
        orig = data[idx]
        data[idx] = orig + step
        fp = _scalar(f(x))
        data[idx] = orig - step
        fm = _scalar(f(x))
        data[idx] = orig
        out[n] = (fp - fm) / (2.0 * step)
    return out.reshape(data.shape) if indices is None else out


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def sample_indices(shape: tuple[int, ...], count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Up to ``count`` distinct coordinates of an array with ``shape``."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in flat]
