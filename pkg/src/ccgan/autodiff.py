"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its inputs and a backward closure on the output tensor.
``backward`` linearises the recorded graph into a :class:`Tape` (topological
order) and walks it once in reverse.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "DomainError",
    "Tensor",
    "Tape",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "matmul",
    "reshape",
    "transpose",
    "index",
    "clip",
    "sum",
    "mean",
    "relu",
    "leaky_relu",
    "tanh",
    "activation",
    "tensor_binary",
    "sigmoid",
    "softmax",
    "log_softmax",
    "global_average_pool",
    "dropout",
    "conv2d",
    "conv_transpose2d",
    "weight_norm",
    "detach",
    "backward",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""


_GRAD_ENABLED = contextvars.ContextVar("ccgan_grad_enabled", default=True)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them for differentiation."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """n-dimensional float64 array that can take part in differentiation.

    ``grad`` is only populated on leaves (tensors not produced by an op) and
    accumulates across calls to :func:`backward` until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=None)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # Operator sugar; every operator routes through the module-level ops.
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

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bw, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bw
        out.op = op
    return out


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(x.data)


# --------------------------------------------------------------------------
# broadcasting


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible")
        out.append(max(da, db) if 0 not in (da, db) else 0)
    return tuple(reversed(out))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic


def tensor_binary(op_kind: str, a, b) -> Tensor:
    """Dispatch ``add`` / ``sub`` / ``mul`` by name."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op_kind]
    except KeyError:
        raise ValueError(f"unknown binary op {op_kind!r}") from None
    return fn(a, b)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)

    def bw(g):
        if np.any(out == 0):
            raise DomainError("sqrt gradient undefined at 0")
        return (g * 0.5 / out,)

    return _make(out, (x,), bw, "sqrt")


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where clamped."""
    x = _as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


# --------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x, idx) -> Tensor:
    """Basic or advanced numpy indexing; repeated indices accumulate in backward."""
    x = _as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "index")


# --------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if n == 0:
        raise ShapeError(f"mean over empty axes of shape {x.shape}")
    src = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, src).copy(),)

    return _make(out, (x,), bw, "mean")


def global_average_pool(x) -> Tensor:
    """Average over the spatial axes of a ``B x C x H x W`` tensor."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool expects B x C x H x W, got {x.shape}")
    return mean(x, axis=(2, 3))


# --------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(op_kind: str, x, slope: float = 0.2) -> Tensor:
    if op_kind == "leaky_relu":
        return leaky_relu(x, slope)
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[op_kind]
    except KeyError:
        raise ValueError(f"unknown activation {op_kind!r}") from None
    return fn(x)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def dropout(x, p: float, seed, training: bool = True) -> Tensor:
    """Inverted dropout driven by an explicit seed.

    The same ``seed`` always produces the same mask, so a forward pass can
    be replayed exactly (finite-difference checks rely on this).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# --------------------------------------------------------------------------
# convolution


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> strided view (B, Ho, Wo, C, kh, kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _scatter_windows(cols: np.ndarray, canvas_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: (B, Ho, Wo, C, kh, kw) summed onto (B, C, Hc, Wc)."""
    b, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((b, c) + canvas_hw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def conv2d(x, w, b=None, pad: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation. ``x``: B x C x H x W, ``w``: O x C x kH x kW."""
    x, w = _as_tensor(x), _as_tensor(w)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if h + 2 * pad < kh or wd + 2 * pad < kw or ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {h}x{wd} (pad={pad})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, kh, kw, stride, ho, wo).reshape(bsz * ho * wo, c * kh * kw)
    w2 = w.data.reshape(o, -1)
    out = (cols @ w2.T).reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({o},)")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    hp, wp = xp.shape[2:]

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ w2).reshape(bsz, ho, wo, c, kh, kw)
        dxp = _scatter_windows(dcols, (hp, wp), stride)
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x, w, b=None, pad: int = 0, stride: int = 1, output_pad: int = 0) -> Tensor:
    """Transposed convolution. ``x``: B x Cin x H x W, ``w``: Cin x Cout x kH x kW.

    Output side is ``(H - 1) * stride - 2 * pad + kH + output_pad``, which
    inverts the shape map of :func:`conv2d` with the same kernel/pad/stride.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if output_pad < 0 or (output_pad and output_pad >= stride):
        raise ValueError(f"output_pad must be < stride, got {output_pad} with stride {stride}")
    bsz, cin, h, wd = x.shape
    cw, cout, kh, kw = w.shape
    if cin != cw:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {cin}, kernel expects {cw}")
    ho = (h - 1) * stride - 2 * pad + kh + output_pad
    wo = (wd - 1) * stride - 2 * pad + kw + output_pad
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d output size {ho}x{wo} is not positive")
    hc = (h - 1) * stride + kh + output_pad
    wc = (wd - 1) * stride + kw + output_pad
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    w2 = w.data.reshape(cin, -1)
    cols = (x2 @ w2).reshape(bsz, h, wd, cout, kh, kw)
    canvas = _scatter_windows(cols, (hc, wc), stride)
    out = canvas[:, :, pad : pad + ho, pad : pad + wo]
    parents = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose2d bias shape {b.shape} != ({cout},)")
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    else:
        out = out.copy()

    def bw(g):
        dcanvas = np.zeros((bsz, cout, hc, wc))
        dcanvas[:, :, pad : pad + ho, pad : pad + wo] = g
        dcols = _windows(dcanvas, kh, kw, stride, h, wd).reshape(bsz * h * wd, cout * kh * kw)
        dx = (dcols @ w2.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
        dw = (x2.T @ dcols).reshape(w.shape)
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, bw, "conv_transpose2d")


# --------------------------------------------------------------------------
# weight normalisation


def weight_norm(v, g, axis: int = 0) -> Tensor:
    """Effective weight ``g * v / ||v||`` with one norm per slice along ``axis``.

    ``axis`` indexes output units: 1 for dense weights stored ``in x out``,
    0 for conv kernels ``O x C x kH x kW``, 1 for transposed-conv kernels.
    """
    v, g = _as_tensor(v), _as_tensor(g)
    axis = axis % v.ndim
    n_out = v.shape[axis]
    if g.shape != (n_out,):
        raise ShapeError(f"weight_norm scale shape {g.shape} != ({n_out},)")
    red = tuple(i for i in range(v.ndim) if i != axis)
    bshape = [1] * v.ndim
    bshape[axis] = n_out
    norm = np.sqrt((v.data * v.data).sum(axis=red)).reshape(bshape)
    if np.any(norm == 0):
        raise DomainError("weight_norm direction has zero norm")
    unit = v.data / norm
    gb = g.data.reshape(bshape)

    def bw(grad):
        proj = (grad * unit).sum(axis=red)
        dv = gb / norm * (grad - proj.reshape(bshape) * unit)
        return dv, proj

    return _make(gb * unit, (v, g), bw, "weight_norm")


# --------------------------------------------------------------------------
# backward pass


@dataclass
class Tape:
    """Recorded ops reachable from a root, inputs before outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays; call ``zero_grad``
    between independent evaluations.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


def finite_difference_check(
    f: Callable[[object], Tensor],
    params,
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between backward grads and central differences.

    ``params`` is a ParamSet (or any mapping name -> Tensor); ``f(params)``
    must return a scalar and be deterministic. Coordinates are sampled
    uniformly without replacement, at least ``n_coords`` of them, or all
    coordinates when fewer exist. Per-coordinate error is
    ``|a - n| / max(|a|, |n|, floor)`` with 0/0 taken as 0.
    """
    tensors = [t for t in _iter_tensors(params) if t.requires_grad]
    for t in tensors:
        t.zero_grad()
    loss = f(params)
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]

    sizes = np.array([t.size for t in tensors])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            i = int(flat - offsets[k])
            arr = tensors[k].data.reshape(-1)
            orig = arr[i]
            arr[i] = orig + eps
            fp = f(params).item()
            arr[i] = orig - eps
            fm = f(params).item()
            arr[i] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic[k].reshape(-1)[i])
            denom = max(abs(ana), abs(num))
            if denom == 0.0:
                continue
            worst = max(worst, abs(ana - num) / max(denom, floor))
    for t in tensors:
        t.zero_grad()
    return worst


def _iter_tensors(params) -> Iterable[Tensor]:
    if isinstance(params, Tensor):
        return [params]
    if hasattr(params, "values"):
        return list(params.values())
    return list(params)
