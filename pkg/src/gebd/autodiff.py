"""Reverse-mode automatic differentiation over small dense arrays.

Sequence values are T x d float64 matrices (frames x channels); parameters
may be arrays of any shape. Every operation returns a new `Tensor` node
that remembers its inputs and how to push an adjoint back to them, so the
graph built during a forward pass doubles as the gradient tape.
`backward` seeds the loss adjoint with 1 and accumulates `grad` on every
node reachable from the loss whose value influences it.

Tensor values are immutable (the wrapped array is frozen at construction)
and safe to share across threads; a graph must stay on the thread that
built it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """Immutable array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        validate: bool = True,
    ):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if validate:
            if not np.all(np.isfinite(arr)):
                raise ValueError("tensor data must be finite")
            if arr is data and arr.flags.writeable:
                arr = arr.copy()  # never freeze an array the caller still holds
        arr.setflags(write=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def update_data(self, new) -> None:
        """Swap in a new value of the same shape (optimizer updates)."""
        arr = np.ascontiguousarray(np.asarray(new, dtype=np.float64))
        if arr.shape != self.data.shape:
            raise ValueError(f"shape mismatch: {arr.shape} vs {self.data.shape}")
        if arr is new and arr.flags.writeable:
            arr = arr.copy()  # never freeze an array the caller still holds
        arr.setflags(write=False)
        self.data = arr

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def seq_tensor(data, requires_grad: bool = False) -> Tensor:
    """Leaf constructor enforcing the T x d sequence contract."""
    t = Tensor(data, requires_grad)
    if t.data.ndim != 2 or t.data.shape[0] < 1 or t.data.shape[1] < 1:
        raise ValueError(f"sequence tensor must be 2-D with T,d >= 1, got shape {t.data.shape}")
    return t


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ValueError(f"adjoint shape {g.shape} does not match value shape {t.data.shape}")
    t.grad = g if t.grad is None else t.grad + g


def _require_2d(x: Tensor, what: str) -> None:
    if x.data.ndim != 2:
        raise ValueError(f"{what}: expected a 2-D sequence tensor, got shape {x.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two equally shaped tensors."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor(a.data + b.data, parents=(a, b), backward=backward, validate=False)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two equally shaped tensors."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return Tensor(a.data * b.data, parents=(a, b), backward=backward, validate=False)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def backward(g):
        _accumulate(x, g * c)

    return Tensor(x.data * c, parents=(x,), backward=backward, validate=False)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate sequence tensors along the channel axis, order preserved."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels: empty part list")
    for p in parts:
        _require_2d(p, "concat_channels")
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ValueError("concat_channels: all parts must share the frame count")
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        off = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[:, off:off + w])
            off += w

    return Tensor(out, parents=tuple(parts), backward=backward, validate=False)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by sqrt(|row|^2 + eps^2); zero rows map to zero."""
    if eps <= 0:
        raise ValueError("l2_normalize_rows: eps must be positive")
    _require_2d(x, "l2_normalize_rows")
    norms = np.sqrt((x.data ** 2).sum(axis=1) + eps * eps)

    def backward(g):
        dot = (g * x.data).sum(axis=1)
        dx = g / norms[:, None] - x.data * (dot / norms ** 3)[:, None]
        _accumulate(x, dx)

    return Tensor(x.data / norms[:, None], parents=(x,), backward=backward, validate=False)


def sum_all(x: Tensor) -> Tensor:
    """Sum every entry into a 1x1 scalar carrier."""

    def backward(g):
        _accumulate(x, np.full(x.data.shape, g[0, 0]))

    return Tensor([[x.data.sum()]], parents=(x,), backward=backward, validate=False)


def time_matmul(matrix: np.ndarray, x: Tensor) -> Tensor:
    """Apply a fixed (non-learnable) matrix along the frame axis: out = M @ x."""
    m = np.asarray(matrix, dtype=np.float64)
    _require_2d(x, "time_matmul")
    if m.ndim != 2 or m.shape[1] != x.data.shape[0]:
        raise ValueError(f"time_matmul: matrix {m.shape} does not match {x.data.shape[0]} frames")

    def backward(g):
        _accumulate(x, m.T @ g)

    return Tensor(m @ x.data, parents=(x,), backward=backward, validate=False)


def backward(loss: Tensor) -> None:
    """Propagate adjoints from a scalar loss to every contributing tensor.

    Accumulates into `.grad`; callers zero parameter grads between steps.
    """
    if loss.data.shape != (1, 1):
        raise ValueError(f"backward: loss must be a 1x1 scalar tensor, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((1, 1))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
