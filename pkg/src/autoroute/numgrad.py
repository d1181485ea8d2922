"""Small reverse-mode autodiff engine for rank-2 float64 arrays.

Only what the dense routing networks need is here: broadcasting arithmetic,
matmul, tanh, reductions, concatenation and a row-wise Euclidean norm. A
tensor records its parents only when at least one input requires a gradient,
so a frozen network never builds a graph.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "DenseBlock",
    "LayeredNet",
    "concat",
    "row_norm",
    "mse",
    "make_mlp",
    "forward",
    "sgd_step",
    "cosine_lr",
    "grad_check",
    "GradCheckReport",
]


def _as_matrix(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(ax for ax in range(2) if shape[ax] == 1 and g.shape[ax] != 1)
    return g.sum(axis=axes, keepdims=True)


class Tensor:
    """A (rows, cols) array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` are parameters. Results of
    operations on them keep a closure that pushes the upstream gradient back to
    their parents.
    """

    __slots__ = ("values", "grad", "requires_grad", "velocity", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _as_matrix(values)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.velocity: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def _result(self, values, parents, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.values = values
        out.grad = None
        out.velocity = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.values.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            a._accumulate(g)
            b._accumulate(g)

        return self._result(a.values + b.values, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            a._accumulate(g)
            b._accumulate(-g)

        return self._result(a.values - b.values, (a, b), backward)

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return self._result(-a.values, (a,), backward)

    def __mul__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            a._accumulate(g * b.values)
            b._accumulate(g * a.values)

        return self._result(a.values * b.values, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        a, b = self, other

        def backward(g):
            a._accumulate(g / b.values)
            b._accumulate(-g * a.values / (b.values * b.values))

        return self._result(a.values / b.values, (a, b), backward)

    def __pow__(self, exponent: float):
        a = self
        exponent = float(exponent)

        def backward(g):
            a._accumulate(g * exponent * a.values ** (exponent - 1.0))

        return self._result(a.values**exponent, (a,), backward)

    def __matmul__(self, other):
        other = self._wrap(other)
        a, b = self, other
        if a.values.shape[1] != b.values.shape[0]:
            raise ShapeError(f"matmul {a.values.shape} @ {b.values.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.values.T)
            if b.requires_grad:
                b._accumulate(a.values.T @ g)

        return self._result(a.values @ b.values, (a, b), backward)

    def tanh(self):
        a = self
        y = np.tanh(a.values)

        def backward(g):
            a._accumulate(g * (1.0 - y * y))

        return self._result(y, (a,), backward)

    def sum(self, axis: int | None = None):
        a = self
        shape = a.values.shape
        if axis is None:
            val = a.values.sum().reshape(1, 1)
        else:
            val = a.values.sum(axis=axis, keepdims=True)

        def backward(g):
            a._accumulate(np.broadcast_to(g, shape))

        return self._result(val, (a,), backward)

    def mean(self, axis: int | None = None):
        n = self.values.size if axis is None else self.values.shape[axis]
        return self.sum(axis) * (1.0 / n)

    # -- gradients ----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every tensor upstream of this scalar."""
        if self.values.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar, got shape {self.values.shape}")
        if self._backward is None:
            raise GraphError("no recorded forward pass leads to this tensor")

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
            for parent in node._parents:
                if parent._backward is not None and id(parent) not in seen:
                    stack.append((parent, False))

        for node in order:
            if node is not self:
                node.grad = None
        self.grad = np.ones((1, 1))
        for node in reversed(order):
            if node.grad is not None:
                node._backward(node.grad)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along columns (default) or rows."""
    parts = list(tensors)
    sizes = [t.values.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(parts, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return parts[0]._result(np.concatenate([t.values for t in parts], axis=axis), tuple(parts), backward)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row, shape (rows, 1). Zero rows get zero gradient."""
    norm = np.sqrt((x.values * x.values).sum(axis=1, keepdims=True))

    def backward(g):
        safe = np.where(norm > 0.0, norm, 1.0)
        x._accumulate(np.where(norm > 0.0, g * x.values / safe, 0.0))

    return x._result(norm, (x,), backward)


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - target
    return (diff * diff).mean()


# -- networks ---------------------------------------------------------------


class DenseBlock:
    """``act(x @ weight + bias)`` with weight of shape (in_dim, out_dim)."""

    def __init__(self, weight, bias=None, activation: str = "none", trainable: bool = True):
        if activation not in ("none", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = Tensor(weight, requires_grad=trainable)
        self.bias = None if bias is None else Tensor(np.reshape(bias, (1, -1)), requires_grad=trainable)
        if self.bias is not None and self.bias.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"bias width {self.bias.shape[1]} != out_dim {self.weight.shape[1]}")
        self.activation = activation

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        h = x @ self.weight
        if self.bias is not None:
            h = h + self.bias
        if self.activation == "tanh":
            h = h.tanh()
        return h


class LayeredNet:
    """Sequential dense blocks; outputs of ``tap_indices`` blocks are exposed."""

    def __init__(self, blocks: Sequence[DenseBlock], tap_indices: Sequence[int] | None = None, trainable: bool = True):
        self.blocks = list(blocks)
        if tap_indices is None:
            tap_indices = range(len(self.blocks) - 1)
        self.tap_indices = list(tap_indices)
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"block widths do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.trainable = True
        if not trainable:
            self.freeze()

    @property
    def tap_dims(self) -> list[int]:
        return [self.blocks[k].out_dim for k in self.tap_indices]

    @property
    def in_dim(self) -> int:
        return self.blocks[0].in_dim

    def parameters(self) -> list[Tensor]:
        return [p for block in self.blocks for p in block.parameters()]

    def freeze(self) -> "LayeredNet":
        self.trainable = False
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.values).tobytes())
        return h.hexdigest()


def make_mlp(dims: Sequence[int], rng: np.random.Generator, activation: str = "tanh", trainable: bool = True) -> LayeredNet:
    """Blocks ``dims[0] -> dims[1] -> ... -> dims[-1]``, activation on all but the last.

    Weights and biases are uniform in +-1/sqrt(in_dim). Every hidden output is a tap.
    """
    blocks = []
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / math.sqrt(d_in)
        w = rng.uniform(-bound, bound, size=(d_in, d_out))
        b = rng.uniform(-bound, bound, size=(1, d_out))
        act = activation if k < len(dims) - 2 else "none"
        blocks.append(DenseBlock(w, b, act))
    return LayeredNet(blocks, trainable=trainable)


def forward(net: LayeredNet, x, hook: Callable[[int, Tensor], Tensor] | None = None) -> tuple[Tensor, list[Tensor]]:
    """Run ``net`` on ``x``; return the output and the tap representations.

    ``hook(tap_position, h)`` may replace the representation at each tap before
    it is fed to the next block; the returned taps are the replaced ones.
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    taps: list[Tensor] = []
    tap_pos = {k: pos for pos, k in enumerate(net.tap_indices)}
    for k, block in enumerate(net.blocks):
        if h.shape[1] != block.in_dim:
            raise ShapeError(f"block {k}: input width {h.shape[1]} != in_dim {block.in_dim}")
        h = block(h)
        pos = tap_pos.get(k)
        if pos is not None:
            if hook is not None:
                h = hook(pos, h)
            taps.append(h)
    return h, taps


# -- optimisation -----------------------------------------------------------


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """In-place SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``. Velocity
    lives on the tensor and starts at zero. Tensors without a gradient are skipped.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if weight_decay < 0:
        raise ValueError("weight_decay must be non-negative")
    live = [p for p in params if p.grad is not None]
    for p in live:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError("non-finite gradient; step aborted")
    for p in live:
        step = p.grad + weight_decay * p.values if weight_decay else p.grad
        if momentum:
            if p.velocity is None:
                p.velocity = np.zeros_like(p.values)
            p.velocity = momentum * p.velocity + step
            step = p.velocity
        p.values = p.values - lr * step


def cosine_lr(epoch: float, total_epochs: float, lr0: float) -> float:
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch outside [0, total_epochs]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple[int, tuple[int, int]]

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5, floor: float = 1e-4) -> GradCheckReport:
    """Compare backward gradients of scalar ``f()`` to central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps near-zero gradients from reporting cancellation noise as error.
    """
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]

    worst_rel, worst_abs, worst = 0.0, 0.0, (-1, (-1, -1))
    for idx, (p, a) in enumerate(zip(params, analytic)):
        for pos in np.ndindex(*p.values.shape):
            orig = p.values[pos]
            p.values[pos] = orig + eps
            up = float(f().values[0, 0])
            p.values[pos] = orig - eps
            down = float(f().values[0, 0])
            p.values[pos] = orig
            num = (up - down) / (2.0 * eps)
            err = abs(a[pos] - num)
            rel = err / max(abs(a[pos]), abs(num), floor)
            worst_abs = max(worst_abs, err)
            if rel > worst_rel:
                worst_rel, worst = rel, (idx, pos)
    return GradCheckReport(worst_rel, worst_abs, worst)
