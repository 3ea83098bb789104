"""Dense float64 tensors with reverse-mode differentiation.

Every derivative rule is itself written with the differentiable operations in
this module. ``backward(..., build_higher=True)`` runs those rules with graph
recording switched on, so the returned gradients are ordinary graph-linked
tensors and can be differentiated again (double backprop). With
``build_higher=False`` the same rules run under :func:`no_grad` and yield
plain tensors.

Broadcasting is limited to scalar-with-tensor. Axis broadcasting needed by
derivative rules goes through the explicit :func:`expand` operation.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "GraphNode", "no_grad", "enable_grad", "is_grad_enabled",
    "add", "sub", "mul", "div", "neg", "relu", "sigmoid", "exp", "log",
    "dot", "l2_norm", "gap", "sum", "mean", "amax", "expand", "reshape",
    "transpose", "matmul", "outer", "stack", "take", "logsumexp",
    "conv2d", "backward", "finite_diff_gradient", "max_rel_error",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: operations inside record no graph."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class GraphNode:
    """One recorded operation.

    ``vjp`` maps the gradient of the output to a tuple of gradients, one per
    parent (``None`` where a parent gets nothing). Forward values the rule
    needs are captured in the closure.
    """

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp

    def __repr__(self):
        return f"GraphNode({self.op!r}, {len(self.parents)} parents)"


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self):
        return len(self.data)

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


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op: str, parents: tuple, vjp: Callable) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite value produced from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = GraphNode(op, parents, vjp)
    return out


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# -- elementwise ---------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: Tensor, like: Tensor):
    if like.shape == () and g.shape != ():
        return sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "add")
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a), _unbroadcast(neg(g), b)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b),
                   lambda g: (_unbroadcast(mul(g, b), a), _unbroadcast(mul(g, a), b)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return _unbroadcast(ga, a), _unbroadcast(gb, b)

    return _result(a.data / b.data, "div", (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)
    return _result(-a.data, "neg", (a,), lambda g: (neg(g),))


def relu(x) -> Tensor:
    """max(0, x); the derivative at exactly 0 is taken as 0."""
    x = _lift(x)
    mask = Tensor((x.data > 0).astype(np.float64))
    return _result(x.data * mask.data, "relu", (x,), lambda g: (mul(g, mask),))


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _lift(x)

    def vjp(g):
        y = sigmoid(x)
        return (mul(g, mul(y, sub(1.0, y))),)

    return _result(_sigmoid_np(np.atleast_1d(x.data)).reshape(x.shape), "sigmoid", (x,), vjp)


def exp(x) -> Tensor:
    x = _lift(x)
    with np.errstate(over="ignore"):
        val = np.exp(x.data)
    return _result(val, "exp", (x,), lambda g: (mul(g, exp(x)),))


def log(x) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    return _result(np.log(x.data), "log", (x,), lambda g: (div(g, x),))


# -- reductions and shape ops ---------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    return _result(a.data.sum(axis=axes), "sum", (a,),
                   lambda g: (expand(g, a.shape, axes),))


def expand(a, shape, axis) -> Tensor:
    """Broadcast ``a`` back over the reduced ``axis`` to ``shape``; inverse of ``sum``."""
    a = _lift(a)
    shape = tuple(shape)
    axes = _norm_axis(axis, len(shape))
    keep = [1 if i in axes else n for i, n in enumerate(shape)]
    if int(np.prod(keep)) != a.size:
        raise ValueError(f"expand: cannot expand {a.shape} to {shape} over {axes}")
    val = np.broadcast_to(a.data.reshape(keep), shape).copy()
    return _result(val, "expand", (a,), lambda g: (sum(g, axes),))


def mean(a, axis=None) -> Tensor:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes), 1.0 / count)


def gap(a) -> Tensor:
    """Global average pooling: mean over every entry."""
    return mean(a)


def amax(a) -> Tensor:
    """Maximum over all entries; the gradient goes to the first maximizer."""
    a = _lift(a)
    onehot = np.zeros(a.shape)
    onehot[np.unravel_index(int(np.argmax(a.data)), a.shape)] = 1.0
    onehot = Tensor(onehot)
    return _result(a.data.max(), "amax", (a,),
                   lambda g: (mul(expand(g, a.shape, None), onehot),))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    return _result(a.data.reshape(shape), "reshape", (a,),
                   lambda g: (reshape(g, a.shape),))


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ValueError("transpose: expects a matrix")
    return _result(a.data.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def take(a, index: int) -> Tensor:
    """Row ``index`` of ``a`` along the first axis."""
    a = _lift(a)
    n = a.shape[0]

    def vjp(g):
        return (_embed(g, index, n),)

    return _result(a.data[index].copy(), "take", (a,), vjp)


def _embed(g: Tensor, index: int, n: int) -> Tensor:
    val = np.zeros((n,) + g.shape)
    val[index] = g.data
    return _result(val, "embed", (g,), lambda h: (take(h, index),))


def stack(items: Sequence) -> Tensor:
    items = tuple(_lift(t) for t in items)
    if not items:
        raise ValueError("stack: empty sequence")
    if any(t.shape != items[0].shape for t in items):
        raise ValueError("stack: shape mismatch")
    return _result(np.stack([t.data for t in items]), "stack", items,
                   lambda g: tuple(take(g, i) for i in range(len(items))))


# -- products ------------------------------------------------------------------

def dot(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot: length mismatch {a.shape} vs {b.shape}")
    return _result(np.dot(a.data, b.data), "dot", (a, b),
                   lambda g: (mul(g, b), mul(g, a)))


def l2_norm(a) -> Tensor:
    a = _lift(a)
    if a.size == 0:
        raise ValueError("l2_norm: empty input")
    val = np.sqrt(np.sum(a.data * a.data))

    def vjp(g):
        if val == 0.0:
            return (Tensor(np.zeros(a.shape)),)
        return (mul(a, div(g, l2_norm(a))),)

    return _result(val, "l2_norm", (a,), vjp)


def outer(u, v) -> Tensor:
    u, v = _lift(u), _lift(v)
    if u.ndim != 1 or v.ndim != 1:
        raise ValueError("outer: expects vectors")
    return _result(np.outer(u.data, v.data), "outer", (u, v),
                   lambda g: (matmul(g, v), matmul(transpose(g), u)))


def matmul(a, b) -> Tensor:
    """Matrix-matrix or matrix-vector product."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    if b.ndim == 1:
        vjp = lambda g: (outer(g, b), matmul(transpose(a), g))  # noqa: E731
    else:
        vjp = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))  # noqa: E731
    return _result(a.data @ b.data, "matmul", (a, b), vjp)


def logsumexp(a, axis: int = 1) -> Tensor:
    """Row-wise log-sum-exp of a matrix."""
    a = _lift(a)
    if a.ndim != 2:
        raise ValueError("logsumexp: expects a matrix")
    m = a.data.max(axis=axis, keepdims=True)
    val = (m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))).squeeze(axis)

    def vjp(g):
        soft = exp(sub(a, expand(logsumexp(a, axis), a.shape, axis)))
        return (mul(expand(g, a.shape, axis), soft),)

    return _result(val, "logsumexp", (a,), vjp)


# -- convolution ---------------------------------------------------------------
# conv, its input-adjoint and its kernel-adjoint are the three partial
# derivatives of the trilinear form <g, conv(x, w)>, so each one's vjp is
# expressed with the other two.

def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _conv(x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
    height, width = x.shape[1], x.shape[2]
    kh, kw = w.shape[2], w.shape[3]

    def vjp(g):
        return (_conv_input_adj(g, w, stride, pad, height, width),
                _conv_kernel_adj(x, g, stride, pad, kh, kw))

    return _result(kernels.conv_forward(x.data, w.data, stride, pad), "conv2d", (x, w), vjp)


def _conv_input_adj(g: Tensor, w: Tensor, stride, pad, height, width) -> Tensor:
    def vjp(h):
        return _conv(h, w, stride, pad), _conv_kernel_adj(h, g, stride, pad, w.shape[2], w.shape[3])

    val = kernels.conv_grad_input(g.data, w.data, stride, pad, height, width)
    return _result(val, "conv2d_input_adj", (g, w), vjp)


def _conv_kernel_adj(x: Tensor, g: Tensor, stride, pad, kh, kw) -> Tensor:
    def vjp(h):
        return _conv_input_adj(g, h, stride, pad, x.shape[1], x.shape[2]), _conv(x, h, stride, pad)

    val = kernels.conv_grad_weight(x.data, g.data, stride, pad, kh, kw)
    return _result(val, "conv2d_kernel_adj", (x, g), vjp)


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in x H x W input with a C_out x C_in x kh x kw kernel."""
    x, kernel, bias = _lift(x), _lift(kernel), _lift(bias)
    if x.ndim != 3 or kernel.ndim != 4 or bias.ndim != 1:
        raise ValueError(f"conv2d: bad ranks input {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    out_c, in_c, kh, kw = kernel.shape
    if x.shape[0] != in_c:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels, kernel expects {in_c}")
    if bias.shape[0] != out_c:
        raise ValueError(f"conv2d: bias length {bias.shape[0]} != {out_c} output channels")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > x.shape[1] + 2 * padding or kw > x.shape[2] + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    y = _conv(x, kernel, stride, padding)
    return add(y, expand(bias, y.shape, (1, 2)))


# -- differentiation -----------------------------------------------------------

def _relevant(output: Tensor, targets: set) -> tuple[list, set]:
    """Topological order of tensors on a path from a target to ``output``."""
    order, relevant = [], set()
    state: dict[int, int] = {}
    stack_ = [(output, False)]
    while stack_:
        t, done = stack_.pop()
        tid = id(t)
        if done:
            parents = t.node.parents if t.node is not None else ()
            if tid in targets or any(id(p) in relevant for p in parents):
                relevant.add(tid)
            order.append(t)
            continue
        if tid in state:
            continue
        state[tid] = 1
        stack_.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in state:
                    stack_.append((p, False))
    return order, relevant


def backward(output: Tensor, wrt: Iterable[Tensor], build_higher: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    Unreachable entries get zeros. With ``build_higher`` the gradients are
    graph-linked and may be differentiated again.
    """
    if output.shape != ():
        raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    targets = {id(t) for t in wrt}
    found: dict[int, Tensor] = {}
    if output.requires_grad or id(output) in targets:
        order, relevant = _relevant(output, targets)
        with _grad_mode(build_higher):
            grads: dict[int, Tensor] = {id(output): Tensor(1.0)}
            for t in reversed(order):
                tid = id(t)
                if tid not in relevant:
                    continue
                g = grads.pop(tid, None)
                if g is None:
                    continue
                if tid in targets:
                    found[tid] = g
                if t.node is None:
                    continue
                for p, pg in zip(t.node.parents, t.node.vjp(g)):
                    pid = id(p)
                    if pg is None or pid not in relevant:
                        continue
                    grads[pid] = add(grads[pid], pg) if pid in grads else pg
    out = []
    for t in wrt:
        g = found.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros(t.shape)))
    return out


def finite_diff_gradient(fn: Callable, x, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of the scalar map ``fn`` at ``x``."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def _eval(v):
        out = fn(Tensor(v.reshape(base.shape)))
        return float(out.data) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _eval(flat)
        flat[i] = orig - eps
        fm = _eval(flat)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad)


def max_rel_error(analytic, numeric) -> float:
    """Normwise relative error ``max|a - n| / max(max|a|, max|n|)``."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=np.float64)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    diff = np.max(np.abs(a - n), initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)
