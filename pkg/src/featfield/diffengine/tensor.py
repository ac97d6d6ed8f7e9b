"""Tensor carrier and the flat recording tape used for reverse-mode sweeps."""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from featfield.errors import NonScalarLoss

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array with an optional gradient buffer.

    Leaves are created by the user; non-leaf tensors are produced by ops
    recorded on a :class:`Tape`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index", "__weakref__")
    # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._index = -1

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
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __rtruediv__(self, other):
        return _ops.div(other, self)

    def __neg__(self):
        return _ops.neg(self)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def __getitem__(self, index):
        return _ops.slice(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops.mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered log of executed ops.

    Use as a context manager; while active, every op with at least one
    grad-requiring input appends a record. Outside any tape, ops run
    forward-only and their outputs do not require grad.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        """Drop the recorded graph.

        Recorded tensors and the tape reference each other, so without this
        a finished graph lingers until the cyclic garbage collector runs.
        """
        for out, _, _ in self.records:
            out._tape = None
            out.requires_grad = False
        self.records.clear()

    def record(self, out: Tensor, inputs: tuple, fn: BackwardFn) -> None:
        out._tape = self
        out._index = len(self.records)
        self.records.append((out, inputs, fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for i in range(loss._index, -1, -1):
            out, inputs, fn = self.records[i]
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    gi = np.asarray(gi, dtype=inp.dtype)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss has no recorded history; compute it inside a Tape")
    loss._tape.backward(loss)


def record(out_data: np.ndarray, inputs: tuple, fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` and log it on the active tape when any input needs grad."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, fn)
    return out


from featfield.diffengine import ops as _ops  # noqa: E402  (operator sugar needs ops)
