"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Without an active tape the engine runs in
pure inference mode and records nothing.

    with Tape() as tape:
        loss = reduce_sum(mul(x, x))
    (gx,) = backward(tape, loss, [x])
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, ValidationError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __pow__(self, other):
        return pow(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def tensor(data, requires_grad: bool = False, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records operation nodes in execution order (hence topologically)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite value in forward result")


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as a Tensor and put a node on the active tape if needed.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    _check_finite(op, out)
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), result, backward))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ops -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return record("div", out, (a, b), backward)


def pow(a, p) -> Tensor:
    """Elementwise ``a ** p``; ``p`` may be a scalar or a broadcastable tensor."""
    a, p = _pair(a, p)
    _broadcast_shape("pow", a, p)
    x, e = a.data, p.data
    fractional = e != np.round(e)
    if np.any((x < 0) & fractional):
        raise NumericError("pow: negative base with non-integer exponent")
    if np.any((x == 0) & (e < 0)):
        raise NumericError("pow: zero base with negative exponent")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x ** e

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = np.where(e == 0, 0.0, e * x ** (e - 1))
            ga = np.nan_to_num(ga, nan=0.0, posinf=0.0, neginf=0.0)
        gp = None
        if p.requires_grad:
            if np.any(x < 0):
                raise NumericError("pow: exponent gradient undefined for negative base")
            with np.errstate(divide="ignore", invalid="ignore"):
                gp = np.where(x > 0, out * np.log(np.where(x > 0, x, 1.0)), 0.0)
            gp = _unbroadcast(g * gp, p.shape)
        return _unbroadcast(g * ga, a.shape), gp

    return record("pow", out, (a, p), backward)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# elementwise unary ops ------------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # derivative at exactly 0 is 0
    return record("relu", np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                  lambda g: (g * mask,))


# linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", out, (a, b), backward)


# reductions -----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    return record("reduce_sum", np.asarray(out), (a,),
                  lambda g: (_expand(g, a.shape, axes, keepdims).copy(),))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims)
    return record("reduce_mean", np.asarray(out), (a,),
                  lambda g: (_expand(g, a.shape, axes, keepdims) / n,))


def reduce_max(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Maximum along one axis (or all); ties route the gradient to the first index."""
    if axis is None:
        flat = reshape(a, (-1,))
        return reduce_max(flat, 0, keepdims=False) if not keepdims else \
            reshape(reduce_max(flat, 0), (1,) * a.data.ndim)
    axis = axis % a.data.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, idx, gg, axis=axis)
        return (grad,)

    return record("reduce_max", out, (a,), backward)


# shape ops ------------------------------------------------------------------

def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return record("slice", np.array(out), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", out, tuple(tensors),
                  lambda g: tuple(np.split(g, bounds, axis=axis)))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# convolution ----------------------------------------------------------------

def conv_padding(k: int, padding) -> tuple[int, int]:
    """(left, right) zero padding for a kernel of size ``k``."""
    if padding == "valid":
        return 0, 0
    if padding == "same":
        left = (k - 1) // 2
        return left, k - 1 - left
    if isinstance(padding, (int, np.integer)):
        return int(padding), int(padding)
    if isinstance(padding, tuple) and len(padding) == 2:
        return int(padding[0]), int(padding[1])
    raise ValidationError(f"unknown padding {padding!r}")


def conv_output_length(t: int, k: int, stride: int = 1, padding="valid") -> int:
    left, right = conv_padding(k, padding)
    return (t + left + right - k) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding="valid") -> Tensor:
    """Cross-correlation of ``x`` [B, C_in, T] with ``w`` [C_out, C_in, k]."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-d input and kernels, got {x.shape} and {w.shape}")
    bsz, c_in, t = x.shape
    c_out, wc_in, k = w.shape
    if wc_in != c_in:
        raise ShapeError(f"conv1d: channel mismatch between input {x.shape} and kernels {w.shape}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {b.shape} does not match kernels {w.shape}")
    if stride < 1:
        raise ValidationError("conv1d: stride must be >= 1")
    left, right = conv_padding(k, padding)
    if k > t + left + right:
        raise ShapeError(f"conv1d: kernel size {k} exceeds padded length of input {x.shape}")
    t_pad = t + left + right
    t_out = (t_pad - k) // stride + 1
    span = stride * (t_out - 1) + 1
    # time-major im2col: cols[b, t, j, c] = xp[b, t * stride + j, c]
    xp = np.zeros((bsz, t_pad, c_in), dtype=x.dtype)
    xp[:, left:left + t] = x.data.transpose(0, 2, 1)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, :span:stride]
    cols = win.transpose(0, 1, 3, 2).reshape(bsz * t_out, k * c_in)
    wmat = w.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(bsz, t_out, c_out).transpose(0, 2, 1))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(bsz * t_out, c_out)
        gw = (gt.T @ cols).reshape(c_out, k, c_in).transpose(0, 2, 1).copy() \
            if w.requires_grad else None
        gb = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(bsz, t_out, k, c_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j:j + span:stride] += gcols[:, :, j]
            gx = np.ascontiguousarray(gxp[:, left:left + t].transpose(0, 2, 1))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record("conv1d", out, inputs, backward)


def max_pool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling over time; the ragged tail is dropped."""
    bsz, c, t = x.shape
    n = t // window
    if n < 1:
        raise ShapeError(f"max_pool1d: window {window} longer than input {x.shape}")
    trimmed = slice_(x, (slice(None), slice(None), slice(0, n * window))) if n * window != t else x
    return reduce_max(reshape(trimmed, (bsz, c, n, window)), axis=3)


# reverse sweep --------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None) -> list | None:
    """Propagate d(loss)/d(.) through ``tape``.

    Sets ``.grad`` on every leaf that requires a gradient. When ``params`` is
    given, returns their gradients in order (zeros for unreached params).
    """
    if loss.size != 1:
        raise ValidationError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = set()
    for node in reversed(tape.nodes):
        key = id(node.output)
        produced.add(key)
        g = grads.pop(key, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            k = id(inp)
            leaves[k] = inp
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = np.array(gi, dtype=inp.dtype, copy=True)
    for k, t in leaves.items():
        if k not in produced and k in grads:
            t.grad = grads[k]
    if params is None:
        if id(loss) in grads and loss.requires_grad is True and id(loss) not in produced:
            loss.grad = grads[id(loss)]
        return None
    out = []
    for p in params:
        g = grads.get(id(p))
        if id(p) == id(loss):
            g = np.ones_like(p.data)
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g
        out.append(g)
    return out


def finite_diff_check(fn: Callable[..., Tensor], point: Sequence, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` takes the tensors of ``point`` and returns a scalar Tensor.
    """
    inputs = [Tensor(np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64),
                     requires_grad=True) for p in point]
    with Tape() as tape:
        loss = fn(*inputs)
    ad = backward(tape, loss, inputs)
    worst = 0.0
    for i, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        gflat = ad[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(fn(*[Tensor(t.data) for t in inputs]).data)
            flat[j] = orig - eps
            fm = float(fn(*[Tensor(t.data) for t in inputs]).data)
            flat[j] = orig
            fd = (fp - fm) / (2 * eps)
            denom = max(abs(gflat[j]), abs(fd), 1e-8)
            worst = max(worst, abs(gflat[j] - fd) / denom)
    return worst
