"""Dense-array engine with reverse-mode differentiation.

Tensors wrap a numpy array plus the bookkeeping needed to pull gradients
back through every operation the networks use.  The graph is built eagerly:
each op records its parent tensors and a vector-Jacobian closure; calling
``backward()`` on a scalar walks the graph in reverse topological order.

Elementwise ops require equal shapes or a scalar operand; there is no
implicit broadcasting.  Structural needs (bias rows, channel statistics,
gathers) are covered by dedicated ops instead.
"""

from __future__ import annotations

import contextvars
import math

import numpy as np

DEFAULT_DTYPE = np.float32

# Stand-in for log(0); keeps log-space arithmetic total (no -inf, no NaN).
LOG_ZERO = -1.0e30


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


_GRAD_ENABLED = contextvars.ContextVar("kwsv_grad_enabled", default=True)


class no_grad:
    """Context manager that disables graph construction inside its scope."""

    def __enter__(self):
        self._token = _GRAD_ENABLED.set(False)
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAD_ENABLED.reset(self._token)
        return False


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    # -- basic introspection -------------------------------------------------

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
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every ancestor that
        requires them.  Repeated calls add on top of existing grads."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                held = flowing.get(pid)
                flowing[pid] = pg if held is None else held + pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError(f".T expects a matrix, got shape {self.shape}")
        return transpose(self, (1, 0))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def _toposort(root):
    # Iterative DFS; graph chains easily exceed the recursion limit.
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def _from_op(data, parents, vjp):
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_elementwise(a, b, op):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ "
                         "and neither is scalar")


def _reduce_to(g, shape):
    # Collapse a gradient onto a scalar operand's shape.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_elementwise(a, b, "add")
    return _from_op(a.data + b.data, (a, b),
                    lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_elementwise(a, b, "sub")
    return _from_op(a.data - b.data, (a, b),
                    lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_elementwise(a, b, "mul")
    return _from_op(a.data * b.data, (a, b),
                    lambda g: (_reduce_to(g * b.data, a.shape),
                               _reduce_to(g * a.data, b.shape)))


def div(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_elementwise(a, b, "div")
    out = a.data / b.data
    return _from_op(out, (a, b),
                    lambda g: (_reduce_to(g / b.data, a.shape),
                               _reduce_to(-g * out / b.data, b.shape)))


def neg(a):
    return _from_op(-a.data, (a,), lambda g: (-g,))


# -- elementwise nonlinearities -------------------------------------------


def sigmoid(a):
    # Split by sign so exp never overflows.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    return _from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return _from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return _from_op(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False),
                    (a,), lambda g: (g * mask,))


def exp(a):
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log: inputs must be strictly positive")
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    if np.any(a.data < 0):
        raise ValueError("sqrt: inputs must be non-negative")
    out = np.sqrt(a.data)
    return _from_op(out, (a,), lambda g: (g / (2.0 * out),))


def logaddexp(a, b):
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_elementwise(a, b, "logaddexp")
    out = np.logaddexp(a.data, b.data)
    return _from_op(out, (a, b),
                    lambda g: (_reduce_to(g * np.exp(a.data - out), a.shape),
                               _reduce_to(g * np.exp(b.data - out), b.shape)))


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _from_op(a.data @ b.data, (a, b),
                    lambda g: (g @ b.data.T, a.data.T @ g))


def bias_add(x, b):
    """Add a length-d vector to every row of an R x d matrix."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: expected (R, d) + (d,), got {x.shape} and {b.shape}")
    return _from_op(x.data + b.data[None, :], (x, b),
                    lambda g: (g, g.sum(axis=0)))


# -- softmax family --------------------------------------------------------


def _check_finite(x, op):
    if np.isnan(x).any():
        raise ValueError(f"{op}: input contains NaN")


def softmax(a, axis=-1):
    _check_finite(a.data, "softmax")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _from_op(out, (a,), vjp)


def log_softmax(a, axis=-1):
    _check_finite(a.data, "log_softmax")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _from_op(out, (a,), vjp)


# -- reductions -------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape),)

    return _from_op(out, (a,), vjp)


def mean_(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to((g / n).reshape((1,) * a.ndim), a.shape),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / n, a.shape),)

    return _from_op(out, (a,), vjp)


# -- structural ops ----------------------------------------------------------


def reshape(a, shape):
    old = a.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _from_op(a.data.transpose(axes), (a,),
                    lambda g: (g.transpose(inverse),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        mover = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(mover[offsets[i]:offsets[i + 1]], 0, axis)
                     for i in range(len(sizes)))

    return _from_op(out, tuple(tensors), vjp)


def take(a, key):
    """Basic (slice/int) indexing with gradient scattered back."""
    out = a.data[key]
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[key] = g
        return (z,)

    return _from_op(np.array(out, copy=True), (a,), vjp)


def take_columns(a, cols):
    """Gather columns of a matrix; repeated column indices accumulate."""
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2:
        raise ShapeError(f"take_columns expects a matrix, got shape {a.shape}")
    rows = np.arange(a.shape[0], dtype=np.intp)
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, (rows[:, None], cols[None, :]), g)
        return (z,)

    return _from_op(np.array(a.data[:, cols]), (a,), vjp)


def gather_pairs(a, rows, cols):
    """Pick a[rows[i], cols[i]] for each i; returns a 1-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, (rows, cols), g)
        return (z,)

    return _from_op(np.array(a.data[rows, cols]), (a,), vjp)


# -- convolution -------------------------------------------------------------


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def _same_pad(size, k, stride, dil):
    out = -(-size // stride)  # ceil division
    span = (k - 1) * dil + 1
    total = max((out - 1) * stride + span - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, kernel, stride=(1, 1), dilation=1):
    """Zero same-padded cross-correlation over C x H x W (or B x C x H x W) maps.

    Output spatial size is ceil(H/s_h) x ceil(W/s_w).
    """
    squeeze = x.ndim == 3
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got shape {kernel.shape}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got shape {x.shape}")
    c_out, c_in, kh, kw = kernel.shape
    xin = x.data[None] if squeeze else x.data
    if xin.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {xin.shape[1]} channels but kernel "
                         f"expects {c_in} (input {x.shape}, kernel {kernel.shape})")
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    if min(sh, sw, dh, dw) < 1:
        raise ValueError("conv2d: stride and dilation must be >= 1")
    b, _, h, w = xin.shape
    ho, ph0, ph1 = _same_pad(h, kh, sh, dh)
    wo, pw0, pw1 = _same_pad(w, kw, sw, dw)
    xp = np.pad(xin, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))

    def window(i, j):
        return xp[:, :, i * dh:i * dh + (ho - 1) * sh + 1:sh,
                  j * dw:j * dw + (wo - 1) * sw + 1:sw]

    acc = np.zeros((b, ho, wo, c_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(window(i, j), kernel.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))

    def vjp(g):
        gin = g[None] if squeeze else g
        gt = np.ascontiguousarray(gin.transpose(0, 2, 3, 1))  # B x Ho x Wo x Cout
        dk = np.zeros_like(kernel.data)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                win = window(i, j)
                dk[:, :, i, j] = np.tensordot(gt, win, axes=([0, 1, 2], [0, 2, 3]))
                contrib = np.tensordot(gt, kernel.data[:, :, i, j], axes=([3], [0]))
                dxp[:, :, i * dh:i * dh + (ho - 1) * sh + 1:sh,
                    j * dw:j * dw + (wo - 1) * sw + 1:sw] += contrib.transpose(0, 3, 1, 2)
        dx = dxp[:, :, ph0:ph0 + h, pw0:pw0 + w]
        return (dx[0] if squeeze else dx, dk)

    return _from_op(out[0] if squeeze else out, (x, kernel), vjp)


# -- batch normalization -----------------------------------------------------


def batch_norm(x, gamma, beta, eps=1e-5, mean=None, var=None, mask=None):
    """Per-channel normalization of a B x C x H x W (or C x H x W) map.

    With ``mean``/``var`` given (eval mode) they are treated as constants.
    Otherwise statistics come from the batch itself; ``mask`` (broadcastable,
    1 for valid positions) restricts which elements contribute.  Returns
    ``(out, batch_mean, batch_var)`` where the statistics are plain arrays
    (None in eval mode).
    """
    squeeze = x.ndim == 3
    xin = x.data[None] if squeeze else x.data
    if xin.ndim != 4:
        raise ShapeError(f"batch_norm: expected 3-D or 4-D input, got {x.shape}")
    c = xin.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},), got "
                         f"{gamma.shape} and {beta.shape}")
    axes = (0, 2, 3)
    cshape = (1, c, 1, 1)
    g4 = gamma.data.reshape(cshape)
    b4 = beta.data.reshape(cshape)

    if mean is not None:
        mu = np.asarray(mean, dtype=xin.dtype).reshape(cshape)
        inv = 1.0 / np.sqrt(np.asarray(var, dtype=xin.dtype).reshape(cshape) + eps)
        xhat = (xin - mu) * inv
        out = g4 * xhat + b4

        def vjp_eval(g):
            gin = g[None] if squeeze else g
            dx = gin * g4 * inv
            return (dx[0] if squeeze else dx,
                    (gin * xhat).sum(axis=axes),
                    gin.sum(axis=axes))

        y = _from_op(out[0] if squeeze else out, (x, gamma, beta), vjp_eval)
        return y, None, None

    if mask is None:
        n = float(xin.shape[0] * xin.shape[2] * xin.shape[3])
        mu = xin.mean(axis=axes, keepdims=True)
        var_b = ((xin - mu) ** 2).mean(axis=axes, keepdims=True)
        m4 = None
    else:
        m4 = np.broadcast_to(np.asarray(mask, dtype=xin.dtype),
                             (xin.shape[0], 1, xin.shape[2], xin.shape[3]))
        n = m4.sum()
        if n <= 0:
            raise ValueError("batch_norm: mask selects no elements")
        mu = (xin * m4).sum(axis=axes, keepdims=True) / n
        var_b = (m4 * (xin - mu) ** 2).sum(axis=axes, keepdims=True) / n

    inv = 1.0 / np.sqrt(var_b + eps)
    xhat = (xin - mu) * inv
    out = g4 * xhat + b4

    def vjp_train(g):
        gin = g[None] if squeeze else g
        gh = gin * g4
        s1 = gh.sum(axis=axes, keepdims=True)
        s2 = (gh * xhat).sum(axis=axes, keepdims=True)
        sel = 1.0 if m4 is None else m4
        dx = inv * (gh - sel * (s1 + xhat * s2) / n)
        return (dx[0] if squeeze else dx,
                (gin * xhat).sum(axis=axes),
                gin.sum(axis=axes))

    y = _from_op(out[0] if squeeze else out, (x, gamma, beta), vjp_train)
    return y, mu.reshape(c), var_b.reshape(c)


# -- parameter helpers -------------------------------------------------------


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None):
    return Tensor(data, dtype=dtype)


def uniform_init(rng, shape, fan_in, fan_out, dtype=DEFAULT_DTYPE):
    """Fan-based uniform initialization on +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
