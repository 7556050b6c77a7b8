"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Eager graph construction in the micrograd style: every op returns a new
:class:`Tensor` holding its forward value and a backward closure. Gradients
flow only into subgraphs that reach a ``requires_grad`` leaf, and accumulate
additively across repeated ``backward`` calls until explicitly zeroed.

Design notes
- float64 everywhere; attack-quality numerics outrank speed here.
- ReLU subgradient at 0 is 0, clip passes gradient strictly inside the
  bounds, maximum-with-scalar takes the constant branch at ties.
- Non-finite values are rejected when tensors enter the graph; ops that can
  manufacture non-finite values from finite inputs (div, sqrt) guard their
  domain, so finite-in implies finite-out.
- Heavy kernels (conv2d, bilinear gather/scatter) dispatch to the compiled
  backend in :mod:`advtex._kernels` when it is available.
"""

import numpy as np

from . import _kernels


def _as_f64(data):
    return np.asarray(data, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f64(data)
        if not np.isfinite(self.data).all():
            raise ValueError("non-finite values entering the graph")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @staticmethod
    def _make(data, parents, backward):
        """Internal node constructor; skips the leaf finiteness scan."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def accum_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- graph traversal ----------------------------------------------------

    def _topo(self):
        """Iterative post-order over the requires_grad subgraph."""
        order = []
        seen = set()
        stack = [(self, False)]
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
        return order

    def backward(self):
        """Backpropagate from a scalar; accumulates into ``.grad`` fields."""
        if self.data.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        order = self._topo()
        self.accum_grad(np.ones((), dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_subgraph(self):
        """Clear ``.grad`` on every node of this tensor's grad subgraph."""
        for node in self._topo():
            node.grad = None

    # -- operator sugar -----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(shape, g):
    # Only scalar-vs-array mixing is allowed, so a mismatched adjoint
    # always collapses to a scalar sum.
    if g.shape != shape:
        return g.sum()
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_same_shape("add", a, b)

    def backward(g):
        if a.requires_grad:
            a.accum_grad(_reduce_to(a.data.shape, g))
        if b.requires_grad:
            b.accum_grad(_reduce_to(b.data.shape, g))

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_same_shape("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a.accum_grad(_reduce_to(a.data.shape, g))
        if b.requires_grad:
            b.accum_grad(_reduce_to(b.data.shape, -g))

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_same_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a.accum_grad(_reduce_to(a.data.shape, g * b.data))
        if b.requires_grad:
            b.accum_grad(_reduce_to(b.data.shape, g * a.data))

    return Tensor._make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_same_shape("div", a, b)
    if np.any(np.abs(b.data) < 1e-300):
        raise ValueError("div: denominator too close to zero")

    def backward(g):
        if a.requires_grad:
            a.accum_grad(_reduce_to(a.data.shape, g / b.data))
        if b.requires_grad:
            b.accum_grad(_reduce_to(b.data.shape, -g * a.data / (b.data * b.data)))

    return Tensor._make(a.data / b.data, (a, b), backward)


def relu(x):
    x = _coerce(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * (x.data > 0.0))

    return Tensor._make(out_data, (x,), backward)


def clip(x, lo, hi):
    """Elementwise clip; gradient passes only strictly inside (lo, hi)."""
    x = _coerce(x)
    out_data = np.clip(x.data, lo, hi)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * ((x.data > lo) & (x.data < hi)))

    return Tensor._make(out_data, (x,), backward)


def maximum(x, c):
    """Elementwise max with a scalar constant; ties take the constant branch."""
    x = _coerce(x)
    c = float(c)
    out_data = np.maximum(x.data, c)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * (x.data > c))

    return Tensor._make(out_data, (x,), backward)


def sqrt(x):
    x = _coerce(x)
    if np.any(x.data < 0.0):
        raise ValueError("sqrt: negative input")
    out_data = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g / (2.0 * np.maximum(out_data, 1e-150)))

    return Tensor._make(out_data, (x,), backward)


def sin(x):
    x = _coerce(x)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * np.cos(x.data))

    return Tensor._make(np.sin(x.data), (x,), backward)


def cos(x):
    x = _coerce(x)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(-g * np.sin(x.data))

    return Tensor._make(np.cos(x.data), (x,), backward)


# -- reductions and linear algebra ------------------------------------------


def tsum(x):
    x = _coerce(x)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(np.full(x.data.shape, float(g)))

    return Tensor._make(np.asarray(x.data.sum()), (x,), backward)


def tmean(x):
    x = _coerce(x)
    n = x.data.size

    def backward(g):
        if x.requires_grad:
            x.accum_grad(np.full(x.data.shape, float(g) / n))

    return Tensor._make(np.asarray(x.data.mean()), (x,), backward)


def dot(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"dot: need equal 1-D shapes, got {a.data.shape} and {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accum_grad(float(g) * b.data)
        if b.requires_grad:
            b.accum_grad(float(g) * a.data)

    return Tensor._make(np.asarray(a.data @ b.data), (a, b), backward)


def l2norm(x):
    """Euclidean norm of all elements; gradient x/||x|| (0-safe)."""
    x = _coerce(x)
    n = float(np.sqrt((x.data * x.data).sum()))

    def backward(g):
        if x.requires_grad:
            x.accum_grad(float(g) * x.data / max(n, 1e-12))

    return Tensor._make(np.asarray(n), (x,), backward)


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims {ad.shape} @ {bd.shape}")

        def backward(g):
            if a.requires_grad:
                a.accum_grad(g @ bd.T)
            if b.requires_grad:
                b.accum_grad(ad.T @ g)

        return Tensor._make(ad @ bd, (a, b), backward)
    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims {ad.shape} @ {bd.shape}")

        def backward(g):
            if a.requires_grad:
                a.accum_grad(np.outer(g, bd))
            if b.requires_grad:
                b.accum_grad(ad.T @ g)

        return Tensor._make(ad @ bd, (a, b), backward)
    raise ValueError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")


# -- shape ops ---------------------------------------------------------------


def reshape(x, shape):
    x = _coerce(x)
    old = x.data.shape

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g.reshape(old))

    return Tensor._make(x.data.reshape(shape), (x,), backward)


def permute(x, axes):
    x = _coerce(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g.transpose(inv))

    return Tensor._make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def getitem(x, key):
    x = _coerce(x)
    out_data = x.data[key]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[key] = g
            x.accum_grad(gx)

    return Tensor._make(out_data, (x,), backward)


# -- network ops -------------------------------------------------------------


def conv2d(x, w, b, stride=1):
    """Valid NCHW convolution; x (N,C,H,W), w (F,C,kh,kw), b (F,)."""
    x, w, b = _coerce(x), _coerce(w), _coerce(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"conv2d: bad shapes x{x.data.shape} w{w.data.shape}")
    if x.data.shape[2] < w.data.shape[2] or x.data.shape[3] < w.data.shape[3]:
        raise ValueError(f"conv2d: kernel {w.data.shape} larger than input {x.data.shape}")
    n, c, h, wd = x.data.shape
    _, _, kh, kw = w.data.shape
    out_data = _kernels.conv2d_forward(x.data, w.data, b.data, stride)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x.accum_grad(_kernels.conv2d_grad_input(g, w.data, stride, h, wd))
        if w.requires_grad:
            w.accum_grad(_kernels.conv2d_grad_weight(g, x.data, stride, kh, kw))
        if b.requires_grad:
            b.accum_grad(g.sum(axis=(0, 2, 3)))

    return Tensor._make(out_data, (x, w, b), backward)


def maxpool2d(x, k, stride):
    """NCHW max pooling; ties resolve to the first (row-major) element."""
    x = _coerce(x)
    n, c, h, w = x.data.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            ni, ci, oy, ox = np.indices((n, c, ho, wo))
            hy = oy * stride + idx // k
            hx = ox * stride + idx % k
            np.add.at(gx, (ni, ci, hy, hx), g)
            x.accum_grad(gx)

    return Tensor._make(np.ascontiguousarray(out_data), (x,), backward)


def bias_add_nchw(x, b):
    """x (N,F,H,W) + per-channel bias b (F,)."""
    x, b = _coerce(x), _coerce(b)
    if x.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"bias_add_nchw: {x.data.shape} vs {b.data.shape}")

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g)
        if b.requires_grad:
            b.accum_grad(g.sum(axis=(0, 2, 3)))

    return Tensor._make(x.data + b.data[None, :, None, None], (x, b), backward)


def bias_add_rows(x, b):
    """x (N,D) + row bias b (D,)."""
    x, b = _coerce(x), _coerce(b)
    if x.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"bias_add_rows: {x.data.shape} vs {b.data.shape}")

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g)
        if b.requires_grad:
            b.accum_grad(g.sum(axis=0))

    return Tensor._make(x.data + b.data[None, :], (x, b), backward)


def channel_mix(x, weights):
    """Weighted sum over the channel axis: x (C,H,W) with constant (C,) weights."""
    x = _coerce(x)
    wv = _as_f64(weights)
    if x.data.ndim != 3 or wv.shape != (x.data.shape[0],):
        raise ValueError(f"channel_mix: x{x.data.shape} weights{wv.shape}")

    def backward(g):
        if x.requires_grad:
            x.accum_grad(wv[:, None, None] * g[None, :, :])

    return Tensor._make(np.tensordot(wv, x.data, axes=1), (x,), backward)


def _upsample_axis(n_in, n_out):
    # Corner-aligned source cells for each output index; a size-1 axis
    # degenerates to constant replication (both taps on cell 0).
    if n_in == 1:
        zero = np.zeros(n_out, dtype=np.int64)
        return zero, zero, np.zeros(n_out)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(src.astype(np.int64), n_in - 2)
    return i0, i0 + 1, src - i0


def bilinear_upsample2d(x, out_h, out_w):
    """Corner-aligned bilinear upsampling of a 2-D map."""
    x = _coerce(x)
    h, w = x.data.shape
    iy0, iy1, fy = _upsample_axis(h, out_h)
    ix0, ix1, fx = _upsample_axis(w, out_w)
    wy = np.stack([1.0 - fy, fy])
    wx = np.stack([1.0 - fx, fx])
    rows = (iy0, iy1)
    cols = (ix0, ix1)
    d = x.data
    out_data = (
        wy[0][:, None] * (wx[0][None, :] * d[np.ix_(iy0, ix0)] + wx[1][None, :] * d[np.ix_(iy0, ix1)])
        + wy[1][:, None] * (wx[0][None, :] * d[np.ix_(iy1, ix0)] + wx[1][None, :] * d[np.ix_(iy1, ix1)])
    )

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(d)
            for dy in (0, 1):
                for dx in (0, 1):
                    np.add.at(
                        gx,
                        np.ix_(rows[dy], cols[dx]),
                        wy[dy][:, None] * wx[dx][None, :] * g,
                    )
            x.accum_grad(gx)

    return Tensor._make(out_data, (x,), backward)


# -- gradient checking -------------------------------------------------------


def grad_check(f, x, eps=1e-4):
    """Max discrepancy between backprop and central finite differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. The
    error for each component is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1), i.e.
    relative for large gradients and absolute for small ones.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    base = _as_f64(x.data if isinstance(x, Tensor) else x).copy()
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.shape != ():
        raise ValueError("grad_check: f must return a scalar")
    out.backward()
    g_ad = np.zeros_like(base) if leaf.grad is None else leaf.grad.copy()

    g_fd = np.zeros_like(base)
    flat = base.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1.0)
    return float((np.abs(g_ad - g_fd) / denom).max())
