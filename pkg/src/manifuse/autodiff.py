"""Minimal reverse-mode differentiation on float64 arrays.

Every op returns a new Tensor holding forward values, the parent tensors,
and a closure computing parent gradients from the output gradient.
backward() walks the graph once and ADDS the resulting gradients into each
tensor's persistent .grad, so repeated backward passes accumulate (two
passes double the gradient) and parameters keep their gradients across the
batch until the optimizer zeroes them.

All arithmetic is 64-bit: at desk scale gradient-check fidelity matters
more than speed.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class Tensor:
    """A value array paired with a same-shape gradient accumulator."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("tensor values must be finite")
        self.grad = np.zeros_like(self.values)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.values)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into .grad for every node that
        requires gradients. self must be scalar."""
        if self.values.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        order = _toposort(self)
        local: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in order:  # already reverse-topological
            g = local.pop(id(node), None)
            if g is None or node._bwd is None:
                if g is not None and node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._bwd(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in local:
                    local[key] = local[key] + pg
                else:
                    local[key] = pg
            if node.requires_grad:
                node.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse-topological order (root first), iterative to spare the
    recursion limit on deep graphs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.values * b.values,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        ),
    )


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make(a.values * s, (a,), lambda g: (g * s,))


def absolute(a) -> Tensor:
    """|a| with the subgradient at 0 defined as 0 (via sign)."""
    a = as_tensor(a)
    return _make(np.abs(a.values), (a,), lambda g: (g * np.sign(a.values),))


def relu(a) -> Tensor:
    """max(0, x); the subgradient at the kink is 0."""
    a = as_tensor(a)
    mask = a.values > 0.0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.values)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# Shape and reduction ops (channel axis = 1 on B,C,H,W tensors)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def softmax_channels(a) -> Tensor:
    """Softmax over axis 1, max-subtracted for stability. Outputs are in
    (0, 1) and sum to 1 across the channel axis at every position."""
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), bwd)


def sum_channels(a) -> Tensor:
    """Sum over axis 1, keeping the axis (B,C,H,W -> B,1,H,W)."""
    a = as_tensor(a)
    c = a.shape[1]
    return _make(
        a.values.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, c, axis=1),),
    )


def global_avg_pool(a) -> Tensor:
    """Mean over the spatial axes: B,C,H,W -> B,C,1,1."""
    a = as_tensor(a)
    _, _, h, w = a.shape
    out = a.values.mean(axis=(2, 3), keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g / (h * w), a.shape).copy(),))


def concat_channels(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate([p.values for p in parts], axis=1), tuple(parts), bwd)


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over all elements; gradients flow into both
    arguments (the auxiliary-loss trainer differentiates the target side)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    n = diff.size
    out = np.asarray(np.mean(diff**2))

    def bwd(g):
        base = (2.0 / n) * diff * g
        return (base, -base)

    return _make(out, (pred, target), bwd)
