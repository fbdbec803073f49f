"""Rank-4 tensors and a define-by-run tape for reverse-mode differentiation.

Operations only record onto the tape when one is active (``with Tape() as t``)
and at least one operand requires a gradient. Outside a tape every op is a
plain numpy computation, which is what inference uses.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeRecord",
    "backward",
    "default_dtype",
    "high_precision",
    "precision",
]

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the element type used for newly created tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def high_precision():
    """64-bit mode. Only meant for finite-difference gradient checks."""
    return precision(np.float64)


class Tensor:
    """Dense (N, C, H, W) array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        arr = arr.astype(default_dtype() if dtype is None else dtype, copy=False)
        if arr.ndim != 4:
            raise ValueError(f"Tensor must be rank 4 (N, C, H, W), got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def scalar(cls, value: float, requires_grad: bool = False) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), value), requires_grad=requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Arithmetic sugar; the implementations live in dark.ops.
    def __add__(self, other):
        from dark import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from dark import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -float(other))

    def __rsub__(self, other):
        from dark import ops

        return ops.add_scalar(ops.scale(self, -1.0), float(other))

    def __mul__(self, other):
        from dark import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from dark import ops

        return ops.scale(self, -1.0)


@dataclass(eq=False)
class TapeRecord:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str = ""


@dataclass(eq=False)
class Tape:
    """Ordered log of differentiable ops for one forward pass.

    A tape belongs to a single training step and a single thread.
    """

    records: list[TapeRecord] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(self, loss)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(name: str, inputs: tuple[Tensor, ...], out: np.ndarray, grad_fn) -> Tensor:
    """Wrap ``out`` and log it on the active tape if any input needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape.records.append(TapeRecord(inputs, result, grad_fn, name))
    return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) back through ``tape``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated; the
    returned dict maps each such leaf to its gradient from this call.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    if not loss.requires_grad or id(loss) not in produced:
        raise ValueError("loss is detached from the tape; nothing to differentiate")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise RuntimeError(f"{rec.name}: gradient shape {gi.shape} != operand shape {t.data.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t

    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads[key].astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
        out[t] = g
    return out
