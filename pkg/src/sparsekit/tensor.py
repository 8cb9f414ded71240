"""Dense tensors with tape-style reverse-mode differentiation.

Each differentiable op records a node holding its parents and a closure
that maps the output gradient to parent gradients. :func:`backward`
walks the recorded graph once in reverse topological order and then
consumes it; a second call on the same loss raises :class:`GraphError`.

Storage is 32-bit float. Reductions (sums, matmul, convolution)
accumulate in 64-bit and cast back. :func:`float64_precision` switches the
storage type for finite-difference checks.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from sparsekit.errors import GraphError, NonFiniteError, ShapeError

FloatArray = NDArray[np.floating]
BackwardFn = Callable[[FloatArray], Sequence[FloatArray | None]]

_dtype: type[np.floating] = np.float32
_grad_enabled = True


@contextlib.contextmanager
def float64_precision() -> Iterator[None]:
    """Create op outputs in float64 while the context is active."""
    global _dtype
    previous = _dtype
    _dtype = np.float64
    try:
        yield
    finally:
        _dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph (evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def active_dtype() -> type[np.floating]:
    return _dtype


class _Node:
    __slots__ = ("backward_fn", "consumed", "op", "parents")

    def __init__(self, op: str, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        self.op = op
        self.parents = parents
        self.backward_fn: BackwardFn | None = backward_fn
        self.consumed = False


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("_node", "data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        self.data: FloatArray = np.ascontiguousarray(data, dtype=_dtype)
        self.grad: FloatArray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: _Node | None = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> FloatArray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


Operand = Tensor | float | int | np.ndarray


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for array in arrays:
        if not np.isfinite(array).all():
            raise NonFiniteError(f"{op}: non-finite values")


def _make(
    op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn
) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _make("add", ta.data + tb.data, (ta, tb), _backward)


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _make("sub", ta.data - tb.data, (ta, tb), _backward)


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return _make("mul", ta.data * tb.data, (ta, tb), _backward)


def square(a: Tensor) -> Tensor:
    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (2.0 * a.data * g,)

    return _make("square", np.square(a.data), (a,), _backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g * out,)

    return _make("exp", out, (a,), _backward)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log: non-positive input")

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g / a.data,)

    return _make("log", np.log(a.data), (a,), _backward)


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(a.data)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g * 0.5 / out,)

    return _make("sqrt", out, (a,), _backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), _backward)


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g * _sigmoid(a.data),)

    return _make("softplus", np.logaddexp(0.0, a.data), (a,), _backward)


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g * positive,)

    return _make("relu", np.where(positive, a.data, 0.0), (a,), _backward)


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    """Clip to ``[low, high]``; the gradient is zero on and outside the bounds."""
    inside = (a.data > low) & (a.data < high)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g * inside,)

    return _make("clamp", np.clip(a.data, low, high), (a,), _backward)


def straight_through_mask(weights: Tensor, keep: np.ndarray) -> Tensor:
    """``weights * keep`` in the forward pass, identity in the backward pass.

    The dense gradient reaches every underlying weight, masked or not.
    """
    if keep.shape != weights.shape:
        raise ShapeError(f"mask shape {keep.shape} != weight shape {weights.shape}")

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g,)

    return _make("mask", weights.data * keep, (weights,), _backward)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    total = np.sum(a.data, dtype=np.float64)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (np.broadcast_to(g, a.shape).astype(_dtype),)

    return _make("sum", np.asarray(total), (a,), _backward)


def mean_all(a: Tensor) -> Tensor:
    n = max(a.size, 1)
    total = np.sum(a.data, dtype=np.float64) / n

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (np.broadcast_to(g / n, a.shape).astype(_dtype),)

    return _make("mean", np.asarray(total), (a,), _backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g.reshape(a.shape),)

    return _make("reshape", a.data.reshape(shape), (a,), _backward)


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis but the first."""
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Row-major dense product of ``[m, k] x [k, n]``."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    _check_finite("matmul", a.data, b.data)
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        g64 = g.astype(np.float64)
        return (g64 @ b64.T).astype(_dtype), (a64.T @ g64).astype(_dtype)

    return _make("matmul", a64 @ b64, (a, b), _backward)


def _windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape ``[N, C, Ho, Wo, kh, kw]`` over a padded input."""
    view = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, *, stride: int = 1, padding: int = 0) -> Tensor:
    """Valid cross-correlation of ``[N, C, H, W]`` with ``[F, C, kh, kw]``."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D operands, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if c != kc:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {kc}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    _check_finite("conv2d", x.data, kernel.data)

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(x.data.astype(np.float64), pad)
    k64 = kernel.data.astype(np.float64)
    cols = _windows(padded, kh, kw, stride)
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.einsum("nchwij,fcij->nfhw", cols, k64, optimize=True)

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        g64 = g.astype(np.float64)
        grad_kernel = np.einsum("nfhw,nchwij->fcij", g64, cols, optimize=True)
        grad_padded = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("nfhw,fc->nchw", g64, k64[:, :, i, j], optimize=True)
                grad_padded[
                    :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                ] += contrib
        grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w]
        return grad_x.astype(_dtype), grad_kernel.astype(_dtype)

    return _make("conv2d", out, (x, kernel), _backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"pool size {size} does not tile input {h}x{w}")
    ho, wo = h // size, w // size
    blocks = (
        x.data.reshape(n, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, size * size)
    )
    winner = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        grad_blocks = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(grad_blocks, winner[..., None], g[..., None], axis=-1)
        grad = (
            grad_blocks.reshape(n, c, ho, wo, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (grad,)

    return _make("max_pool2d", out, (x,), _backward)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``[N, K]`` logits against integer labels."""
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    loss = -log_probs[rows, labels].mean()

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return ((grad * (g / labels.shape[0])).astype(_dtype),)

    return _make("cross_entropy", np.asarray(loss), (logits,), _backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for parent in tensor._node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``grad`` of every leaf that requires it with d(loss)/d(leaf).

    Leaf gradients accumulate into existing ``grad`` slots; the graph is
    consumed afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GraphError("loss was not produced by a recorded forward graph")
    if loss._node.consumed:
        raise GraphError("backward already ran on this graph")

    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for tensor in reversed(order):
        g = grads.pop(id(tensor), None)
        node = tensor._node
        if node is None:
            if g is not None:
                g = g.astype(tensor.data.dtype).reshape(tensor.shape)
                tensor.grad = g if tensor.grad is None else tensor.grad + g
            continue
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g), strict=True):
            if pg is None or not parent.requires_grad:
                continue
            previous = grads.get(id(parent))
            grads[id(parent)] = pg if previous is None else previous + pg

    for tensor in order:
        if tensor._node is not None:
            tensor._node.consumed = True
            tensor._node.backward_fn = None
