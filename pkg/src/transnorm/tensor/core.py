"""Tensor storage and the reverse-mode gradient tape.

A :class:`Tensor` wraps a float64 numpy array. Operations executed while a
:class:`GradTape` is active (``with GradTape() as tape: ...``) append a node
holding the inputs, the output and a closure that maps the output gradient
to input gradients. :func:`backward` replays those nodes in reverse.

Outside of a tape, operations are plain numpy computations and nothing is
recorded, which is what inference uses.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from transnorm.errors import ContractError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar(
    "transnorm_active_tape", default=None
)


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: GradTape | None = None
        self._index = -1

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # internal constructor: takes ownership of ``data`` without copying
        t = cls.__new__(cls)
        t.data = data if data.dtype == np.float64 else data.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        t._index = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from transnorm.tensor import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from transnorm.tensor import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from transnorm.tensor import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from transnorm.tensor import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from transnorm.tensor import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from transnorm.tensor import ops

        return ops.div(other, self)

    def __neg__(self):
        from transnorm.tensor import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from transnorm.tensor import ops

        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from transnorm.tensor import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from transnorm.tensor import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from transnorm.tensor import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from transnorm.tensor import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)


def as_tensor(value) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else wrap it as a constant."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class GradTape:
    """Ordered record of differentiable operations.

    The tape is bound to the current execution context (thread or asyncio
    task) while entered, so independent contexts can each run their own tape.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, retain_graph: bool = False) -> None:
        backward(loss, retain_graph)

    def first_non_finite(self) -> Node | None:
        """First recorded node (in forward order) whose output is not finite."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node
        return None


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE.get()


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` as a Tensor and append a tape node if gradients are needed."""
    result = Tensor._wrap(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._tape = tape
        result._index = len(tape.nodes)
        tape.nodes.append(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every leaf tensor that ``loss`` depends on.

    Gradients are summed over every use of a tensor and accumulate into an
    existing ``.grad``. Intermediate tensors get no ``.grad``. Unless
    ``retain_graph`` is set the tape is emptied afterwards, which frees the
    recorded activations without waiting for the cycle collector.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active GradTape")

    if loss._index >= len(tape.nodes) or tape.nodes[loss._index].output is not loss:
        raise ContractError("the graph of this loss was already released; use retain_graph=True to reuse it")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss._index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                if inp._tape is not tape:
                    leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    if not retain_graph:
        tape.nodes.clear()
