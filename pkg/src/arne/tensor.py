"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy buffer plus an optional gradient buffer
and the lineage needed for reverse-mode traversal.  Kernels are dense
numpy operations; the differentiation bookkeeping lives here.

Scalars default to float32 for training throughput.  Gradient checking
and numerically delicate tests run under float64 via ``precision``.
"""

import contextlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def set_default_dtype(dtype):
    """Set the scalar precision used for newly created tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ContractError(f"unsupported scalar dtype {dt}, use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default scalar precision."""
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


def grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable lineage recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


_RELU_TRACE = None


@contextlib.contextmanager
def relu_trace(sink):
    """Record the sign pattern of every relu evaluated inside the block.

    Two evaluations with identical traces lie on the same smooth piece of
    the network, which is what finite differences require.
    """
    global _RELU_TRACE
    saved = _RELU_TRACE
    _RELU_TRACE = sink
    try:
        yield sink
    finally:
        _RELU_TRACE = saved


class Tensor:
    """N-dimensional dense array with optional gradient and lineage.

    The data buffer is immutable by convention once the tensor is built;
    only ``grad`` is mutated (by accumulation during backward and by
    ``zero_grad``).
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._vjp = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad})"

    def item(self):
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        """The underlying buffer; treat as read-only."""
        return self.data

    def detach(self):
        """A grad-less leaf sharing this tensor's buffer."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- backward ------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        The root must be scalar-shaped.  Each graph node is visited
        exactly once, in reverse topological order; gradients from
        multiple uses accumulate by addition.
        """
        if self.size != 1:
            raise ContractError(f"backward() root must be scalar-shaped, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        # ids of arrays already serving as some tensor's grad; a vjp output
        # may be adopted without copying only when it aliases none of them
        live = {id(self.grad)}
        for node in reversed(order):
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._prev, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    if (g.base is None and id(g) not in live
                            and g.dtype == parent.data.dtype and g.shape == parent.data.shape):
                        parent.grad = g
                    else:
                        parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
                    live.add(id(parent.grad))
                else:
                    parent.grad += g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def sqrt(self):
        return sqrt(self)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def _toposort(root):
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._prev))]
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            if id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(name, out_data, parents, vjp):
    """Wire up an op result: lineage recorded only when a parent needs grads."""
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._vjp = vjp
        out._op = name
    return out


def _unbroadcast(g, shape):
    """Sum a gradient over broadcast dimensions back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and broadcast arithmetic --------------------------------


def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node("add", out, (a, b), vjp)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node("sub", out, (a, b), vjp)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node("mul", out, (a, b), vjp)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node("div", out, (a, b), vjp)


def neg(a):
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    if not isinstance(b, Tensor):
        b = _coerce(b, a)
    return a, b


# -- linear algebra ------------------------------------------------------


def matmul(a, b):
    """Matrix product; batched over leading dimensions with broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node("matmul", out, (a, b), vjp)


# -- nonlinearities ------------------------------------------------------


def relu(a):
    mask = a.data > 0
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(np.packbits(mask.reshape(-1)))
    return _node("relu", np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def exp(a):
    out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a):
    return _node("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _node("sqrt", out, (a,), lambda g: (g * (0.5 / out),))


def sigmoid(a):
    # split by sign to stay finite for large |x|
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    return _node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _node("softplus", out, (a,), vjp)


def softmax(a):
    """Softmax over the last axis."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node("softmax", out, (a,), vjp)


def log_softmax(a):
    """Log-softmax over the last axis, max-shifted for stability."""
    shift = a - Tensor(a.data.max(axis=-1, keepdims=True), dtype=a.dtype)
    return shift - log(sum_(exp(shift), axis=-1, keepdims=True))


# -- reductions ----------------------------------------------------------


def _reduced_grad(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(in_shape)), in_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(in_shape) for ax in axes)
    if not keepdims:
        shape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _node("sum", out, (a,), lambda g: (_reduced_grad(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        return (_reduced_grad(g, a.shape, axis, keepdims) / count,)

    return _node("mean", out, (a,), vjp)


def orderless_sum(a, axis):
    """Sum along ``axis`` with a value-canonical accumulation order.

    Each reduced lane is sorted before adding, so any permutation of the
    inputs along ``axis`` produces bit-identical output.  The gradient is
    the same as a plain sum.
    """
    out = np.sort(a.data, axis=axis).sum(axis=axis)
    return _node("orderless_sum", out, (a,), lambda g: (_reduced_grad(g, a.shape, axis, False),))


# -- shape manipulation ---------------------------------------------------


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return _node("reshape", out, (a,), lambda g: (np.ascontiguousarray(g).reshape(a.shape),))


def transpose(a, axes=None):
    out = a.data.transpose(axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _node("transpose", out, (a,), lambda g: (g.transpose(inverse),))


def slice_(a, idx):
    """Basic (slice/int) indexing; backward scatters into a zero buffer."""
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _node("slice", out, (a,), vjp)


def take(a, indices, axis):
    """Select 1-d indices along an axis (repeats allowed); backward scatter-adds."""
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ContractError("take expects 1-d indices")
    out = np.take(a.data, indices, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (ga,)

    return _node("take", out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _node("concat", out, tuple(tensors), vjp)


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape)
    return _node("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# -- convolution kernel ----------------------------------------------------


def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = windows[:, :, ::stride, ::stride]            # (B, C, OH, OW, kh, kw)
    cols = cols.transpose(0, 2, 3, 1, 4, 5)             # (B, OH, OW, C, kh, kw)
    oh, ow = cols.shape[1], cols.shape[2]
    return np.ascontiguousarray(cols).reshape(b, oh, ow, c * kh * kw)


def conv2d(x, weight, bias, stride=2, pad=1):
    """Strided cross-correlation with zero padding (the panel-encoder kernel).

    x: (B, C, H, W); weight: (O, C, kh, kw); bias: (O,).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but kernel expects {weight.shape[1]}"
        )
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    cols = _im2col(x.data, kh, kw, stride, pad)         # (B, OH, OW, C*kh*kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1)                    # (B, OH, OW, O)
        gw = (gt.reshape(-1, o).T @ cols.reshape(-1, cols.shape[-1])).reshape(weight.shape)
        gb = gt.sum(axis=(0, 1, 2))
        gcols = (gt @ wmat).reshape(b, oh, ow, c, kh, kw)
        gxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride] += (
                    gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return np.ascontiguousarray(gx), gw, gb

    return _node("conv2d", out, (x, weight, bias), vjp)


def batchnorm2d_train(x, gamma, beta, eps):
    """Fused per-channel batch normalization over (B, H, W), train mode.

    Returns (out, batch_mean, batch_var) with the statistics as plain
    (C,) arrays for the caller's running-average update; the variance is
    the biased estimate used for normalization.
    """
    b, c, h, w = x.shape
    n = b * h * w
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    diff = x.data - mu
    var = np.mean(diff * diff, axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv_std
    gm = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gm + beta.data.reshape(1, c, 1, 1)

    def vjp(g):
        dgamma = np.sum(g * xhat, axis=(0, 2, 3))
        dbeta = np.sum(g, axis=(0, 2, 3))
        dxhat = g * gm
        m1 = dxhat.sum(axis=(0, 2, 3), keepdims=True) / n
        m2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / n
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    out_t = _node("batchnorm2d", out, (x, gamma, beta), vjp)
    return out_t, mu.reshape(-1), var.reshape(-1)


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    op_name: str
    max_relative_error: float
    tolerance: float
    passed: bool


def _same_trace(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(op, inputs, eps=1e-5, tol=1e-4, max_entries=None, rng=None, name=None):
    """Compare analytic gradients of a scalar-valued op against central differences.

    ``op`` takes the given tensors and must reduce to a scalar tensor.
    The tensors are probed in place (each coordinate is perturbed by
    +-eps and restored bit-exactly), so ``op`` may equally read them as
    module parameters it closes over.  Relative error uses denominator
    max(|analytic|, |numeric|, 1e-8).  ``max_entries`` caps the probed
    coordinates per input (sampled with ``rng``) to keep composite checks
    tractable.

    Coordinates whose probe interval flips any relu are excluded: the
    function is not differentiable across the kink, so a central
    difference there measures neither one-sided slope.
    """
    if eps <= 0:
        raise ContractError("grad_check needs eps > 0")
    saved_state = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = op(*inputs)
        if out.size != 1:
            raise ContractError(f"grad_check op must output a scalar, got shape {out.shape}")
        out.backward()
        analytics = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
                     for t in inputs]

        def probe(current_op):
            sink = []
            with relu_trace(sink):
                value = current_op(*inputs).item()
            return value, sink

        max_rel = 0.0
        with no_grad():
            for t, analytic in zip(inputs, analytics):
                coords = np.arange(t.size)
                if max_entries is not None and t.size > max_entries:
                    picker = rng if rng is not None else np.random.default_rng(0)
                    coords = picker.choice(t.size, size=max_entries, replace=False)
                flat = t.data.reshape(-1)
                for i in coords:
                    saved = flat[i]
                    flat[i] = saved + eps
                    f_plus, trace_plus = probe(op)
                    flat[i] = saved - eps
                    f_minus, trace_minus = probe(op)
                    flat[i] = saved
                    if not _same_trace(trace_plus, trace_minus):
                        continue
                    numeric = (f_plus - f_minus) / (2.0 * eps)
                    a = float(analytic.reshape(-1)[i])
                    denom = max(abs(a), abs(numeric), 1e-8)
                    max_rel = max(max_rel, abs(a - numeric) / denom)
    finally:
        for t, (flag, grad) in zip(inputs, saved_state):
            t.requires_grad = flag
            t.grad = grad

    return GradCheckReport(
        op_name=name or getattr(op, "__name__", "op"),
        max_relative_error=float(max_rel),
        tolerance=float(tol),
        passed=max_rel <= tol,
    )
