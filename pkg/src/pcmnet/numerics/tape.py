"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every differentiable operation applied to values it
watches.  Calling :meth:`Tape.backward` walks the record in exact reverse
order and accumulates partial derivatives into each node's ``grad``.

Values not attached to a tape (``Var(x)`` or plain arrays) are constants:
operations on them compute forward values only, which keeps inference cheap.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from pcmnet.errors import ShapeError

DTYPE = np.float64


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Var:
    """A float64 array node, optionally tracked by a tape."""

    __slots__ = ("value", "grad", "tape", "name")
    __array_priority__ = 100.0

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = as_array(value)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.shape}{tag}, tracked={self.requires_grad})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from pcmnet.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from pcmnet.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from pcmnet.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from pcmnet.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from pcmnet.numerics import ops
        return ops.div(self, other)

    def __neg__(self):
        from pcmnet.numerics import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from pcmnet.numerics import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from pcmnet.numerics import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from pcmnet.numerics import ops
        return ops.getitem(self, index)


def to_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


class Tape:
    """Records operations and their backward closures in execution order."""

    def __init__(self):
        self._records: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self.params: dict[str, Var] = {}
        self.visit_log: list[int] | None = None

    def __len__(self) -> int:
        return len(self._records)

    def watch(self, value, name: str | None = None) -> Var:
        """Register ``value`` as a differentiable leaf (parameter)."""
        v = Var(value, tape=self, name=name)
        if name is not None:
            if name in self.params:
                raise ValueError(f"parameter {name!r} already watched")
            self.params[name] = v
        return v

    def record(self, out: Var, parents: Sequence[Var], backward: Callable) -> None:
        out.tape = self
        self._records.append((out, tuple(parents), backward))

    def backward(self, loss: Var, seed=None) -> None:
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.value) if seed is None else as_array(seed)
        for idx in range(len(self._records) - 1, -1, -1):
            out, parents, fn = self._records[idx]
            if out.grad is None:
                continue
            if self.visit_log is not None:
                self.visit_log.append(idx)
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or p.tape is None:
                    continue
                if g.shape != p.value.shape:
                    raise ShapeError(f"gradient shape {g.shape} != value shape {p.value.shape}")
                # accumulate: a value consumed twice gets the sum of both paths
                p.grad = g.copy() if p.grad is None else p.grad + g

    def gradients(self, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        keys = self.params.keys() if names is None else names
        out = {}
        for k in keys:
            v = self.params[k]
            out[k] = np.zeros_like(v.value) if v.grad is None else v.grad
        return out


def tracking_tape(*inputs) -> Tape | None:
    """Return the tape shared by any tracked input, or None."""
    tape = None
    for x in inputs:
        if isinstance(x, Var) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape
