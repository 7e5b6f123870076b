"""Dense tensors with reverse-mode automatic differentiation on numpy.

Every operation returns either a plain value tensor (gradients disabled or
no input tracked) or a graph node carrying a backward closure.
``Tensor.backward()`` walks the recorded graph once in reverse topological
order and accumulates gradients into every tensor that requires them.

float32 is the working precision; the finite-difference gradient checker
rebuilds models in float64. Debug mode screens the output of every
primitive for NaN/Inf so that attention-mask constants (finite, -1e9)
stay auditable.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy import sparse
from scipy.special import erf as _erf

from .errors import NonFiniteTensor, ShapeMismatch

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True
_DEBUG_CHECKS = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference / finite diff)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_checks(enabled=True):
    """Eagerly raise NonFiniteTensor when a primitive produces NaN/Inf."""
    global _DEBUG_CHECKS
    prev = _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled
    try:
        yield
    finally:
        _DEBUG_CHECKS = prev


def set_debug_checks(enabled):
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """N-dimensional float array, row-major, optionally tracking gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- autodiff machinery --------------------------------------------------

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=self.data.dtype)
        self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor (scalar unless grad given)."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)

        # Iterative post-order DFS; deterministic node order gives a fixed
        # gradient accumulation order (bit-reproducibility contract).
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                # Interior grads are not needed once propagated.
                node.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


class Parameter(Tensor):
    """Learnable tensor with a zero-initialized gradient and a model-wide name.

    ``init_kind`` tags how ``nn.init_parameters`` fills the value:
    "trunc_normal", "normal", "zeros" or "ones".
    """

    __slots__ = ("name", "init_kind")

    def __init__(self, shape, dtype=DEFAULT_DTYPE, init="trunc_normal"):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.grad = np.zeros(shape, dtype=dtype)
        self.name = None
        self.init_kind = init

    def zero_grad(self):
        self.grad[...] = 0


# -- node construction -------------------------------------------------------


def _check_finite(data, op):
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteTensor(f"non-finite values produced by '{op}'")


def _node(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    out._parents = ()
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    """Reduce grad back to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise and linear algebra ------------------------------------------


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward, "add")


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward, "mul")


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward, "div")


def power(a, p):
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return _node(data, (a,), backward, "pow")


def sqrt(a):
    a = _as_tensor(a)
    root = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * 0.5 / root)

    return _node(root, (a,), backward, "sqrt")


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * data)

    return _node(data, (a,), backward, "exp")


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _node(data, (a,), backward, "log")


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0))

    return _node(data, (a,), backward, "relu")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a):
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            a._accum(g * (cdf + x * pdf).astype(x.dtype))

    return _node(data, (a,), backward, "gelu")


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul expects tensors of rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward, "matmul")


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _node(data, (a,), backward, "reshape")


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inverse))

    return _node(data, (a,), backward, "transpose")


def take(a, idx):
    """Basic (slice/int/ellipsis) indexing; no repeated elements."""
    a = _as_tensor(a)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accum(full)

    return _node(data, (a,), backward, "take")


def take_rows(a, indices):
    """Gather rows along axis 0 with an integer index array (may repeat)."""
    a = _as_tensor(a)
    indices = np.asarray(indices)
    data = a.data[indices]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, indices, g)
            a._accum(full)

    return _node(data, (a,), backward, "take_rows")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _node(data, tuple(tensors), backward, "concat")


def roll(a, shift, axis):
    a = _as_tensor(a)
    data = np.roll(a.data, shift, axis=axis)
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift

    def backward(g):
        if a.requires_grad:
            a._accum(np.roll(g, neg, axis=axis))

    return _node(data, (a,), backward, "roll")


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            a._accum(_spread(g, a.data.shape, axis, keepdims))

    return _node(data, (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in _normalize_axes(axis, a.data.ndim)]
    )
    inv = 1.0 / float(count)

    def backward(g):
        if a.requires_grad:
            a._accum(_spread(g * inv, a.data.shape, axis, keepdims))

    return _node(data, (a,), backward, "mean")


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _spread(g, shape, axis, keepdims):
    """Broadcast a reduced gradient back over the reduced axes."""
    if not keepdims:
        for ax in sorted(_normalize_axes(axis, len(shape))):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).astype(g.dtype, copy=False)


# -- softmax family ----------------------------------------------------------


def softmax_lastdim(a):
    """Numerically stable softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            a._accum(data * (g - inner))

    return _node(data, (a,), backward, "softmax")


def log_softmax_lastdim(a):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        if a.requires_grad:
            a._accum(g - soft * g.sum(axis=-1, keepdims=True))

    return _node(data, (a,), backward, "log_softmax")


# -- convolution and pooling -------------------------------------------------

_COL_INDEX_CACHE = {}


def _col_indices(C, H, W, kh, kw, stride, pad):
    """Flat indices into the padded (C, Hp, Wp) image for each column entry,
    ordered (c, ky, kx, oy, ox)."""
    key = (C, H, W, kh, kw, stride, pad)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    Hp, Wp = H + 2 * pad, W + 2 * pad
    ho = (Hp - kh) // stride + 1
    wo = (Wp - kw) // stride + 1
    c = np.arange(C).reshape(C, 1, 1, 1, 1)
    ky = np.arange(kh).reshape(1, kh, 1, 1, 1)
    kx = np.arange(kw).reshape(1, 1, kw, 1, 1)
    oy = np.arange(ho).reshape(1, 1, 1, ho, 1)
    ox = np.arange(wo).reshape(1, 1, 1, 1, wo)
    idx = (c * Hp + oy * stride + ky) * Wp + ox * stride + kx
    idx = idx.reshape(-1)
    _COL_INDEX_CACHE[key] = idx
    return idx


def _im2col(x, kh, kw, stride, pad):
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols, N, C, H, W, kh, kw, stride, pad):
    Hp, Wp = H + 2 * pad, W + 2 * pad
    idx = _col_indices(C, H, W, kh, kw, stride, pad)
    offsets = np.arange(N, dtype=np.int64) * (C * Hp * Wp)
    big = (idx[None, :] + offsets[:, None]).ravel()
    acc = np.bincount(big, weights=cols.reshape(N, -1).ravel(),
                      minlength=N * C * Hp * Wp)
    acc = acc.reshape(N, C, Hp, Wp).astype(cols.dtype, copy=False)
    if pad:
        acc = acc[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(acc)


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIkk weights.

    Output shape (N, O, (H + 2p - k) / s + 1, (W + 2p - k) / s + 1).
    """
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch("conv2d expects a 4-d input and 4-d weight")
    N, C, H, W = x.shape
    O, I, kh, kw = w.shape
    if I != C:
        raise ShapeMismatch(f"conv2d channels: input has {C}, weight expects {I}")
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (O,):
            raise ShapeMismatch(f"conv2d bias shape {b.shape} != ({O},)")
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"conv2d output dims not positive: {(ho, wo)}")

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(N, C, H * W)
    else:
        cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w2d = w.data.reshape(O, -1)
    out = np.matmul(w2d, cols)
    if b is not None:
        out = out + b.data[:, None]
    data = out.reshape(N, O, ho, wo)

    def backward(g):
        g2d = g.reshape(N, O, ho * wo)
        if w.requires_grad:
            gw = np.matmul(g2d, cols.transpose(0, 2, 1)).sum(axis=0)
            w._accum(gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accum(g2d.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2d.T, g2d)
            if pointwise:
                x._accum(gcols.reshape(x.data.shape))
            else:
                x._accum(_col2im(gcols, N, C, H, W, kh, kw, stride, padding))

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, backward, "conv2d")


def max_pool2d(x, kernel=3, stride=2, padding=1):
    x = _as_tensor(x)
    N, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(N, C, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    data = np.ascontiguousarray(data)

    def backward(g):
        if not x.requires_grad:
            return
        Hp, Wp = H + 2 * padding, W + 2 * padding
        ky, kx = arg // kernel, arg % kernel
        oy = np.arange(ho).reshape(1, 1, ho, 1)
        ox = np.arange(wo).reshape(1, 1, 1, wo)
        c = np.arange(C).reshape(1, C, 1, 1)
        n = np.arange(N).reshape(N, 1, 1, 1)
        idx = ((n * C + c) * Hp + oy * stride + ky) * Wp + ox * stride + kx
        acc = np.bincount(idx.ravel(), weights=g.ravel(),
                          minlength=N * C * Hp * Wp)
        acc = acc.reshape(N, C, Hp, Wp).astype(g.dtype, copy=False)
        if padding:
            acc = acc[:, :, padding:padding + H, padding:padding + W]
        x._accum(np.ascontiguousarray(acc))

    return _node(data, (x,), backward, "max_pool2d")


_UPSAMPLE_CACHE = {}


def _upsample_matrix(H, W, dtype):
    """Sparse (4HW x HW) operator for 2x bilinear upsampling, half-pixel
    (align_corners=False) convention. Interpolation weights are multiples
    of 0.25, exact in both float32 and float64."""
    key = (H, W, np.dtype(dtype).name)
    cached = _UPSAMPLE_CACHE.get(key)
    if cached is not None:
        return cached

    def axis(n):
        src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = src - lo
        hi = np.clip(lo + 1, 0, n - 1)
        lo = np.clip(lo, 0, n - 1)
        return lo, hi, 1.0 - frac, frac

    y0, y1, wy0, wy1 = axis(H)
    x0, x1, wx0, wx1 = axis(W)
    rows, cols, vals = [], [], []
    out_rows = np.arange(2 * H * 2 * W).reshape(2 * H, 2 * W)
    for ys, wys in ((y0, wy0), (y1, wy1)):
        for xs, wxs in ((x0, wx0), (x1, wx1)):
            rows.append(out_rows.ravel())
            cols.append((ys[:, None] * W + xs[None, :]).ravel())
            vals.append((wys[:, None] * wxs[None, :]).ravel())
    mat = sparse.csr_matrix(
        (np.concatenate(vals).astype(dtype),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(4 * H * W, H * W),
    )
    _UPSAMPLE_CACHE[key] = mat
    return mat


def upsample_bilinear_2x(x):
    """2x bilinear upsampling of an NCHW tensor (half-pixel convention)."""
    x = _as_tensor(x)
    N, C, H, W = x.shape
    mat = _upsample_matrix(H, W, x.data.dtype)
    flat = x.data.reshape(N * C, H * W)
    data = mat.dot(flat.T).T.reshape(N, C, 2 * H, 2 * W)
    data = np.ascontiguousarray(data)

    def backward(g):
        if x.requires_grad:
            gflat = g.reshape(N * C, 4 * H * W)
            gx = mat.T.dot(gflat.T).T.reshape(N, C, H, W)
            x._accum(np.ascontiguousarray(gx))

    return _node(data, (x,), backward, "upsample_bilinear_2x")


# -- convenience wrappers ----------------------------------------------------


def linear(x, w, b=None):
    """Affine map over the last axis: x (..., Din) @ w (Din, Dout) + b."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(
            f"linear: input dim {x.data.shape[-1]} != weight rows {w.data.shape[0]}"
        )
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def global_avg_pool(tokens):
    """Mean over the token axis of a (..., N_t, D) tensor, kept as one token."""
    tokens = _as_tensor(tokens)
    return reduce_mean(tokens, axis=-2, keepdims=True)
