"""Dense-array computation core with reverse-mode differentiation.

Values live in numpy arrays (float32 by default, float64 for verification
runs). Every kernel computes its forward value eagerly and, when an active
Tape is present and any input requires grad, appends an operation record
holding a backward rule. `backward(tape, root)` replays the records in
reverse, accumulating gradients into `.grad`.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "no_grad",
    "set_default_dtype", "default_dtype",
    "add", "sub", "mul", "div", "neg", "matmul", "bias_add",
    "gelu", "sigmoid", "relu", "absolute", "log", "exp",
    "maximum", "minimum", "layer_norm", "softmax", "log_softmax",
    "l2_normalize", "sdpa", "gather_rows", "select", "concat", "stack",
    "reshape", "transpose", "reduce_sum", "reduce_mean",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32


def set_default_dtype(name):
    """Select the dtype new tensors are created with: "f32" or "f64"."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}, expected 'f32' or 'f64'")
    _default_dtype = _DTYPES[name]


def default_dtype():
    return _default_dtype


class ShapeError(ValueError):
    """A kernel was called with non-conforming shapes."""


class Tensor:
    """A dense float array plus differentiation bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            if dtype is None:
                dtype = data.data.dtype
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_DTYPES[dtype] if isinstance(dtype, str) else dtype, copy=False)
        elif arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

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

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the recorded kernels below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("inputs", "out", "vjp")

    def __init__(self, inputs, out, vjp):
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """Ordered log of recorded operations for one forward pass.

    Execution order is topological by construction: a record's inputs are
    always created before the record itself.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, root):
        backward(self, root)


_TAPE_STACK: list[Tape] = []


class no_grad:
    """Context that suspends recording even if a Tape is active."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape, root):
    """Accumulate gradients of a scalar `root` w.r.t. every tensor on `tape`.

    Repeated calls (without clearing grads) accumulate additively.
    """
    if not isinstance(root, Tensor) or root.data.size != 1:
        raise ShapeError("backward root must be a scalar Tensor")
    produced = {id(rec.out) for rec in tape.records}
    if id(root) not in produced:
        raise ValueError("backward root was not produced on this tape")

    flowing = {id(root): np.ones_like(root.data)}
    holders = {id(root): root}
    for rec in reversed(tape.records):
        g_out = flowing.get(id(rec.out))
        if g_out is None:
            continue
        for t, g in zip(rec.inputs, rec.vjp(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in flowing:
                flowing[key] = flowing[key] + g
            else:
                flowing[key] = g
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            g = flowing[key]
            t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype in (np.float32, np.float64) and not isinstance(x, (int, float)):
        # ndarray operands keep their precision; python scalars take the default
        return Tensor(arr, dtype=arr.dtype)
    return Tensor(arr)


def _make(out_data, inputs, vjp):
    out = Tensor(out_data, dtype=out_data.dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _active_tape()
        if tape is not None:
            tape.records.append(_Record(tuple(inputs), out, vjp))
    return out


def _unbroadcast(g, shape):
    """Sum a gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise kernels


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def bias_add(x, b):
    """Add a vector over the last axis (alias of broadcast add with a check)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not fit last axis of {x.shape}")
    return add(x, b)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("div", a, b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def log(a):
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("log: empty input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 0.134145 * x2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * dx,)

    return _make(out, (a,), vjp)


def relu(a):
    a = _as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,),
                 lambda g: (g * (a.data > 0),))


def absolute(a):
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("maximum", a, b)
    take_a = a.data >= b.data
    return _make(np.maximum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape),
                            _unbroadcast(g * ~take_a, b.shape)))


def minimum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("minimum", a, b)
    take_a = a.data <= b.data
    return _make(np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape),
                            _unbroadcast(g * ~take_a, b.shape)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: needs arrays, got shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)

    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# normalizations and attention


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply a learned affine map."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        return (gx, g_gamma, g_beta)

    return _make(out, (x, gamma, beta), vjp)


def softmax(x):
    """Row-stochastic softmax over the last axis (max-subtracted)."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax: empty last axis in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, (x,),
                 lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax(x):
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"log_softmax: empty last axis in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,),
                 lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def l2_normalize(x, eps=1e-12):
    """Scale rows (last axis) to unit Euclidean norm; eps guards zero rows."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"l2_normalize: empty last axis in shape {x.shape}")
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data / n

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _make(y, (x,), vjp)


def sdpa(q, k, v, mask=None, scale=None):
    """Scaled dot-product attention: softmax(q k^T * scale + mask) v.

    q: (..., Lq, dh), k/v: (..., Lk, dh). `mask` is an additive constant
    array broadcastable to (..., Lq, Lk); it never receives gradient.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"sdpa: query width {q.shape} vs key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"sdpa: key count {k.shape} vs value count {v.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        s = s + mask
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def vjp(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = np.matmul(gs, k.data) * scale
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) * scale
        return (_unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape),
                _unbroadcast(gv, v.shape))

    return _make(out, (q, k, v), vjp)


# ---------------------------------------------------------------------------
# indexing, shaping, reductions


def gather_rows(x, idx):
    """Select rows of `x` along axis 0 by an integer array (any idx shape)."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError("gather_rows: index array must be integral")
    if x.ndim == 0:
        raise ShapeError("gather_rows: input must have at least one axis")
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), vjp)


def select(x, axis, index):
    """Take a single slice `index` along `axis` (shape drops that axis)."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"select: axis {axis} out of range for shape {x.shape}")
    out = np.take(x.data, index, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _make(out, (x,), vjp)


def concat(tensors, axis=0):
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not align on axis {axis}") from None
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, vjp)


def stack(tensors, axis=0):
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: empty input list")
    shape = ts[0].shape
    for t in ts:
        if t.shape != shape:
            raise ShapeError(f"stack: mixed shapes {shape} and {t.shape}")
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        parts = np.split(g, len(ts), axis=axis)
        return tuple(p.reshape(shape) for p in parts)

    return _make(out, ts, vjp)


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = _as_tensor(x)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,),
                 lambda g: (g.transpose(inv),))


def reduce_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).astype(x.data.dtype, copy=True),)

    return _make(out, (x,), vjp)


def reduce_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        count = x.shape[axis]
    s = reduce_sum(x, axis=axis, keepdims=keepdims)
    return mul(s, np.asarray(1.0 / count, dtype=x.data.dtype))
