"""Tensor container and the recording tape behind reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one operand requires a gradient. Outside a tape, operations are plain
numpy evaluations and nothing is retained.
"""
from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "mtkd_active_tape", default=None
)


class Tensor:
    """An n-d array of floats with an optional gradient slot.

    ``data`` is a C-contiguous numpy array; ``values`` exposes it flattened in
    row-major order.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt ``arr`` without copying."""
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; implementations live in ops.
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        return ops.transpose(self, axes if axes else None)

    @property
    def T(self):
        return ops.transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return ops.mean(self, axis=axis, keepdims=keepdims)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    name: str


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded in execution order, which is a topological order by
    construction.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._ids = itertools.count(1)
        self._token = None
        self._consumed = False

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn, name: str = "") -> None:
        # Leaves reused across tapes keep their first id; ids are diagnostic,
        # gradient routing is keyed on object identity.
        for t in inputs:
            if t.node_id is None:
                t.node_id = next(self._ids)
        output.node_id = next(self._ids)
        self.records.append(_Record(tuple(inputs), output, backward, name))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(x) into ``grad`` of every recorded leaf.

        Each record is visited once in reverse recording order. Gradients are
        summed for tensors used by several operations, and added to any
        ``grad`` already present on a leaf.
        """
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward()")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        self._consumed = True

        produced = {id(r.output) for r in self.records}
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            input_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = pending.pop(key)
            if g.shape != t.shape:
                raise ContractError(f"gradient shape {g.shape} != tensor shape {t.shape}")
            t.grad = g if t.grad is None else t.grad + g
        self.records.clear()


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Run reverse-mode differentiation of ``loss`` over ``tape``."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractError("no tape given and none active")
    tape.backward(loss)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(dtype or np.float64)
    return Tensor.wrap(arr)


from . import ops  # noqa: E402  (operator sugar above needs the module)
