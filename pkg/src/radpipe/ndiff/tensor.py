"""Tensor wrapper and the reverse-mode tape.

A Tensor owns a numpy array plus an optional creator op.  Graph edges
are only recorded when some input requires gradients, so eval-mode
forward passes build no tape at all.
"""

from __future__ import annotations

import contextlib
from typing import Optional

import numpy as np

from ..errors import StateError, ValidationError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, metrics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.parents: tuple[Tensor, ...] = ()
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- autograd -------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients into every reachable leaf with requires_grad."""
        if not self.requires_grad:
            raise StateError("backward called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValidationError("backward without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValidationError(
                    f"explicit grad shape {grad.shape} != tensor shape {self.data.shape}"
                )

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node.op.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operator sugar (implementations live in ops.py) ----------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, ops.as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, ops.as_tensor(other, like=self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(ops.as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, ops.as_tensor(other, like=self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, ops.as_tensor(other, like=self))

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(ops.as_tensor(other, like=self), self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __getitem__(self, key):
        from . import ops
        return ops.slice_(self, key)


def apply_op(op, *parents: Tensor) -> Tensor:
    """Run an op forward and record the edge if gradients are needed."""
    out_data = op.forward(*[p.data for p in parents])
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out.op = op
        out.parents = parents
    return out


def tensor5(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Validated rank-5 (batch, channel, depth, height, width) tensor."""
    arr = np.asarray(data)
    if arr.ndim != 5:
        raise ValidationError(f"expected rank-5 array (B,C,D,H,W), got rank {arr.ndim}")
    if min(arr.shape) < 1:
        raise ValidationError(f"all dimensions must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError("tensor values must be finite")
    return Tensor(arr, requires_grad=requires_grad, name=name)
