"""Dense float64 tensors with reverse-mode differentiation.

Every network and loss in the package is composed from the primitive
functions in this module.  A :class:`Tensor` records the op that produced
it together with a closure that maps the output gradient to input
gradients; :func:`backward` walks the recorded graph in reverse
topological order, visiting each node once.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when tensor shapes are inconsistent for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ContractError(ValueError):
    """Raised when an op is called outside of its contract."""


_check_finite = True


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _check_finite and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(np.asarray(self.data).item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    """Create the output node of an op.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or None) per parent.  Nodes whose parents need no gradient are plain
    constants and keep no reference to the graph.
    """
    parents = tuple(parents)
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that
    requires gradients."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    return make(a.data @ b.data, (a, b),
                lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope)
    return make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    # overflow is reported by the finiteness check in make()
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ContractError("log of a non-positive value")
    return make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ContractError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def power(x, p: float) -> Tensor:
    """x ** p for positive x and a constant exponent."""
    x = as_tensor(x)
    out = x.data ** p
    return make(out, (x,), lambda g: (g * p * x.data ** (p - 1.0),), "power")


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data >= floor
    return make(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.sum(axis=axis, keepdims=keepdims) / n

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape),)

    return make(out, (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return [np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return make(out, tensors, bw, "concat")


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make(np.array(out), (x,), bw, "slice")


def softmax(x, axis: int) -> Tensor:
    """Softmax along ``axis``; used over the channel axis of per-pixel
    mixture logits."""
    x = as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), bw, "softmax")


def downsample2(x) -> Tensor:
    """2x2 average pooling over the last two axes (odd edges dropped)."""
    x = as_tensor(x)
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    if h == 0 or w == 0:
        raise DimensionError(f"cannot downsample spatial size {x.shape[-2:]}")
    crop = x.data[..., : 2 * h, : 2 * w]
    out = crop.reshape(crop.shape[:-2] + (h, 2, w, 2)).mean(axis=(-3, -1))

    def bw(g):
        full = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        full[..., : 2 * h, : 2 * w] = up
        return (full,)

    return make(out, (x,), bw, "downsample2")


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return make(out, (x,), bw, "upsample2")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C×H×W or N×C×H×W) with ``kernel``
    (C_out×C_in×kh×kw, both sides odd)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects C×H×W input and 4-d kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = xd.shape
    cout, cin, kh, kw = kernel.shape
    if cin != c:
        raise DimensionError(f"conv2d kernel {kernel.shape} incompatible with input {x.shape}")
    if kh % 2 == 0 or kw % 2 == 0 or stride < 1 or padding < 0:
        raise ContractError("conv2d needs odd kernel sides, stride >= 1, padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def tap(arr, i, j):
        return arr[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]

    if cin == 1 and cout == 1:
        # single-channel filters: shifted sums, elementwise and order-stable
        kd = kernel.data[0, 0]
        out = np.zeros((n, 1, ho, wo))
        for i, j in taps:
            out += kd[i, j] * tap(xp, i, j)

        def bw(g):
            g4 = g if batched else g[None]
            gk = gx = None
            if kernel.requires_grad:
                gk = np.array([[(g4 * tap(xp, i, j)).sum() for j in range(kw)] for i in range(kh)])
                gk = gk.reshape(kernel.shape)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i, j in taps:
                    tap(gxp, i, j)[...] += kd[i, j] * g4
                if padding:
                    gxp = gxp[:, :, padding : padding + h, padding : padding + w]
                gx = gxp if batched else gxp[0]
            return gx, gk

        return make(out if batched else out[0], (x, kernel), bw, "conv2d")

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def bw(g):
        g4 = g if batched else g[None]
        gflat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gk = (gflat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i, j in taps:
                tap(gxp, i, j)[...] += gcols[..., i, j]
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            gx = gxp if batched else gxp[0]
        return gx, gk

    return make(out, (x, kernel), bw, "conv2d")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment buffers for a set of named parameters."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 2e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return state
