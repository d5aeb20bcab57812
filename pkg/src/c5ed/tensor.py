"""Dense double-precision tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a backward closure on
the tensor it produces. :func:`backward` walks that graph in reverse
topological order and accumulates gradients into the ``grad`` buffers of leaf
tensors created with ``requires_grad=True``.

Image tensors use the ``N x C x H x W`` layout throughout.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "ShapeError",
    "BatchNormStats",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "conv2d",
    "conv2d_transpose",
    "conv_output_size",
    "batchnorm2d",
    "relu",
    "concat_channels",
    "l1_loss",
]

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An N-dimensional real array that can take part in gradient recording.

    Parameters
    ----------
    data : array_like
        Values, converted to a C-contiguous ``float64`` array.
    requires_grad : bool
        Mark the tensor as a leaf whose gradient should be accumulated.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: BackwardFn,
                op: str = "op") -> "Tensor":
        """Wrap the result of an operation, recording it when any parent needs a gradient.

        ``backward_fn`` receives the gradient of the output and returns one
        gradient (or ``None``) per parent, in order.
        """
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
            out.op = op
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(self.data + other.data, (self, other),
                              lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(self.data - other.data, (self, other),
                              lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)), "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor.from_op(a * b, (self, other),
                              lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor.from_op(out, (self, other),
                              lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
                              "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __getitem__(self, index):
        shape = self.shape

        def _bw(g):
            full = np.zeros(shape, dtype=DTYPE)
            if _needs_add_at(index):
                np.add.at(full, index, g)
            else:
                full[index] = np.reshape(g, np.shape(full[index]))
            return (full,)

        return Tensor.from_op(self.data[index], (self,), _bw, "getitem")

    def square(self) -> "Tensor":
        a = self.data
        return Tensor.from_op(a * a, (self,), lambda g: (2.0 * a * g,), "square")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor.from_op(out, (self,), lambda g: (0.5 * g / out,), "sqrt")

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor.from_op(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), _bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@dataclass
class GradientTape:
    """Operations reachable from a root tensor, in execution (topological) order."""

    ops: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "GradientTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def replay(self, seed_grad: np.ndarray) -> None:
        """Propagate ``seed_grad`` from the last recorded op back to the leaves."""
        if not self.ops:
            return
        grads: dict[int, np.ndarray] = {id(self.ops[-1]): seed_grad}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def reset(self) -> None:
        self.ops.clear()

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    GradientTape.record(loss).replay(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, dilation: int, padding: int, stride: int) -> int:
    span = size + 2 * padding - dilation * (k - 1) - 1
    if span < 0:
        raise ShapeError(f"dilated kernel extent {dilation * (k - 1) + 1} exceeds padded input {size + 2 * padding}")
    if span % stride:
        raise ShapeError(f"output extent ({span}/{stride} + 1) is not an integer")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, xp_shape, kh: int, kw: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp_shape[:2]
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros(xp_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    return x[:, :, p:x.shape[2] - p, p:x.shape[3] - p] if p else x


def _check_conv_args(x: Tensor, weight: Tensor, dilation: int, padding: int, stride: int, in_axis: int):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"expected 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(f"input has {x.shape[1]} channels but weight {weight.shape} expects "
                         f"{weight.shape[in_axis]}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ValueError(f"need dilation >= 1, stride >= 1, padding >= 0; got {dilation}, {stride}, {padding}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, dilation: int = 1,
           padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlate ``x`` (N, Cin, H, W) with ``weight`` (Cout, Cin, kh, kw).

    Kernel taps are spaced ``dilation`` pixels apart. Output extent is
    ``(H + 2*padding - dilation*(k-1) - 1) / stride + 1``.
    """
    _check_conv_args(x, weight, dilation, padding, stride, in_axis=1)
    n, _, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    ho = conv_output_size(h, kh, dilation, padding, stride)
    wo = conv_output_size(w, kw, dilation, padding, stride)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")

    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, dilation, stride, ho, wo)
    wm = weight.data.reshape(cout, -1)
    out = (wm @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    xp_shape = xp.shape

    def _bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _unpad(_col2im(wm.T @ gm, xp_shape, kh, kw, dilation, stride, ho, wo), padding)
        if weight.requires_grad:
            gw = (gm @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _bw, "conv2d")


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0, dilation: int = 1) -> Tensor:
    """Fractionally strided convolution: the adjoint of :func:`conv2d` in its input.

    ``weight`` has shape (Cin, Cout, kh, kw); the output extent is
    ``(H - 1)*stride - 2*padding + dilation*(k-1) + 1``.
    """
    _check_conv_args(x, weight, dilation, padding, stride, in_axis=0)
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    hp = (h - 1) * stride + dilation * (kh - 1) + 1
    wp = (w - 1) * stride + dilation * (kw - 1) + 1
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise ShapeError(f"padding {padding} leaves an empty output for input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")

    wm = weight.data.reshape(cin, -1)
    xm = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    out = _unpad(_col2im(wm.T @ xm, (n, cout, hp, wp), kh, kw, dilation, stride, h, w), padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _bw(g):
        cols = _im2col(_pad(g, padding), kh, kw, dilation, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wm @ cols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = (xm @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, _bw, "conv2d_transpose")


# ---------------------------------------------------------------------------
# normalization, activation, plumbing
# ---------------------------------------------------------------------------

@dataclass
class BatchNormStats:
    """Per-channel running mean and (unbiased) variance."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, training: bool = True,
                eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over the N, H, W axes.

    In training mode batch statistics are used and ``stats`` is updated in
    place; in eval mode the running statistics are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects N x C x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    if n == 0:
        raise ShapeError("batchnorm2d got an empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    m = n * h * w
    g4 = gamma.data[None, :, None, None]

    if training:
        if m < 2:
            raise ShapeError("batchnorm2d in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.mean = (1 - momentum) * stats.mean + momentum * mu
        stats.var = (1 - momentum) * stats.var + momentum * var * m / (m - 1)
    else:
        mu, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = g4 * xhat + beta.data[None, :, None, None]

    def _bw(g):
        dxhat = g * g4
        gx = None
        if x.requires_grad:
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv_std[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor.from_op(out, (x, gamma, beta), _bw, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack N x Ci x H x W tensors along the channel axis, in argument order."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"cannot concatenate {t.shape} with {ref}: batch and spatial extents differ")
    if len(inputs) == 1:
        return inputs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def _bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return Tensor.from_op(np.concatenate([t.data for t in inputs], axis=1), tuple(inputs), _bw, "concat")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sign = np.sign(diff)
    return Tensor.from_op(np.array(np.abs(diff).mean()), (pred, target),
                          lambda g: (g * sign / n, -g * sign / n), "l1_loss")
