"""Reverse-mode autodiff on float64 numpy arrays.

The op set is exactly what the detector needs: conv2d, 2x2 max pooling,
nearest-neighbour upsampling, relu/sigmoid, global average pooling, a
dense layer, and the handful of elementwise/shape ops the losses are
written in. Tensors are NCHW for image data. All math runs in float64;
checkpoints quantize to float32 at the storage boundary.

Every op builds a node whose `_backward` closure scatters the incoming
gradient to its parents. `backward()` walks the graph once in reverse
topological order, so each node's gradient is complete before it is
propagated. Graph traversal order is fully deterministic (parent tuples,
no hash-ordered sets), which makes gradient accumulation bit-reproducible.

Thread safety: distinct graphs may be built and run concurrently; a single
graph must stay on one thread. The grad-mode flag is thread-local.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import GraphConsumedError, NumericError

__all__ = [
    "Tensor",
    "no_grad",
    "activation",
    "relu",
    "sigmoid",
    "clamp",
    "conv2d",
    "pool2",
    "upsample2",
    "global_avg_pool",
    "linear",
    "concat",
    "take",
    "smooth_l1",
    "sigmoid_values",
    "grad_check",
]

# Sentinel for padding odd extents before 2x2 max pooling. Finite so that
# arithmetic stays warning-free; any real activation exceeds it.
POOL_PAD_VALUE = -1e30

_grad_mode = threading.local()


def _grad_enabled():
    return getattr(_grad_mode, "enabled", True)


class no_grad:
    """Context manager that disables graph construction on this thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional gradient buffer and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # Leaves get an eager zero buffer so accumulation across repeated
        # backward calls needs no special casing.
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def _accumulate(self, g):
        if self.grad is None:
            # Copy: g may be a view or a buffer shared with another parent.
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Propagate d(self)/d(leaf) into every reachable leaf's .grad.

        Requires a scalar tensor. A graph may be consumed once; repeated
        calls on new graphs over the same leaves accumulate into .grad.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if self._consumed:
            raise GraphConsumedError("this graph has already been backpropagated")
        order = _topo_order(self)
        self._consumed = True
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                # Release closure and interior buffers promptly.
                node._backward = None
                if node._parents:
                    node.grad = None
                node._parents = ()

    # -- operator sugar (scalar operands are plain constants) --

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return _add(self, _mul(other, -1.0))
        return _add(self, -float(other))

    def __rsub__(self, other):
        return _add(_mul(self, -1.0), float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return _mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return _pow(self, exponent)

    def sum(self):
        return _sum(self)

    def mean(self):
        return _mul(_sum(self), 1.0 / self.data.size)

    def exp(self):
        return _exp(self)

    def log(self):
        return _log(self)

    def reshape(self, *shape):
        return _reshape(self, shape)

    def permute(self, *axes):
        return _permute(self, axes)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if parent._backward is not None or parent.requires_grad:
                stack.append((parent, False))
    return order


def _node(data, parents, backward_fn):
    tracked = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if tracked:
        out.requires_grad = True
        out.grad = None  # interior buffers are allocated on first use
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_const(value):
    return float(value)


# -- elementwise and reduction ops --


def _add(a, other):
    if isinstance(other, Tensor):
        if a.data.shape != other.data.shape:
            raise ValueError(f"shape mismatch for add: {a.shape} vs {other.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        return _node(a.data + other.data, (a, other), backward)

    c = _as_const(other)

    def backward(g):
        a._accumulate(g)

    return _node(a.data + c, (a,), backward)


def _mul(a, other):
    if isinstance(other, Tensor):
        if a.data.shape != other.data.shape:
            raise ValueError(f"shape mismatch for mul: {a.shape} vs {other.shape}")

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * a.data)

        return _node(a.data * other.data, (a, other), backward)

    c = _as_const(other)

    def backward(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), backward)


def _pow(a, exponent):
    p = float(exponent)
    out_data = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(out_data, (a,), backward)


def _exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _node(out_data, (a,), backward)


def _log(a):
    def backward(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), backward)


def _sum(a):
    def backward(g):
        a._accumulate(np.full(a.data.shape, float(g)))

    return _node(a.data.sum(), (a,), backward)


def _reshape(a, shape):
    shape = tuple(shape[0]) if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
    orig = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), backward)


def _permute(a, axes):
    axes = tuple(axes[0]) if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
    inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis=0):
    """Concatenate tensors along an axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(a, indices, axis=0):
    """Gather rows along an axis; backward scatter-adds (duplicates allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("take expects a 1-D index array")

    def backward(g):
        buf = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(buf, idx, g)
        else:
            sl = [slice(None)] * a.data.ndim
            for k, i in enumerate(idx):
                sl[axis] = i
                gsl = [slice(None)] * g.ndim
                gsl[axis] = k
                buf[tuple(sl)] += g[tuple(gsl)]
        a._accumulate(buf)

    return _node(np.take(a.data, idx, axis=axis), (a,), backward)


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes where lo <= x <= hi."""
    lo = float(lo)
    hi = float(hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        a._accumulate(g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a):
    out_data = sigmoid_values(a.data)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def sigmoid_values(x):
    """Numerically stable sigmoid on a plain ndarray."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(a, kind):
    """Apply a named activation, one of 'relu' or 'sigmoid'."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation kind {kind!r}")


def smooth_l1(pred, target):
    """Elementwise smooth-L1 of (pred - target); target is a constant array."""
    t = np.asarray(target, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ValueError(f"shape mismatch for smooth_l1: {pred.shape} vs {t.shape}")
    d = pred.data - t
    small = np.abs(d) < 1.0
    out_data = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)

    def backward(g):
        pred._accumulate(g * np.where(small, d, np.sign(d)))

    return _node(out_data, (pred,), backward)


# -- structured ops --


def _same_padding(extent, k, stride):
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    before = total // 2
    return out, before, total - before


def conv2d(x, kernel, bias, stride=1, padding="same"):
    """2-D cross-correlation over NCHW input.

    kernel is [C_out, C_in, kh, kw] with kh, kw odd. 'same' zero-pads
    symmetrically, extra pixel on the bottom/right when the total is odd;
    'valid' pads nothing and rejects zero-sized outputs.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D, got shape {kernel.shape}")
    n, c_in, h, w = x.data.shape
    if h == 0 or w == 0:
        raise ValueError("conv2d input has an empty spatial extent")
    c_out, kc, kh, kw = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if kc != c_in:
        raise ValueError(f"kernel expects {kc} input channels, input has {c_in}")
    if bias.data.shape != (c_out,):
        raise ValueError(f"bias must have shape ({c_out},), got {bias.shape}")
    stride = int(stride)
    if stride < 1:
        raise ValueError("stride must be >= 1")

    if padding == "same":
        out_h, pt, pb = _same_padding(h, kh, stride)
        out_w, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        out_h = (h - kh) // stride + 1
        out_w = (w - kw) // stride + 1
        pt = pb = pl = pr = 0
        if out_h < 1 or out_w < 1:
            raise ValueError(
                f"valid conv of {kh}x{kw} over {h}x{w} input yields an empty output"
            )
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((n, c_in, kh, kw, out_h, out_w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * out_h : stride,
                                  j : j + stride * out_w : stride]
    cols2 = cols.reshape(n, c_in * kh * kw, out_h * out_w)
    w2 = kernel.data.reshape(c_out, c_in * kh * kw)
    out_data = (w2 @ cols2).reshape(n, c_out, out_h, out_w) + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, c_out, out_h * out_w)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            dw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
            kernel._accumulate(dw.reshape(kernel.data.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, c_in, kh, kw, out_h, out_w)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * out_h : stride,
                        j : j + stride * out_w : stride] += dcols[:, :, i, j]
            x._accumulate(dxp[:, :, pt : pt + h, pl : pl + w])

    return _node(out_data, (x, kernel, bias), backward)


def pool2(x, kind="max"):
    """2x2 stride-2 max pooling; odd extents are padded with a -1e30 sentinel.

    Ties within a window route the gradient to the first element in
    row-major window order, so exactly one cell per window gets gradient.
    """
    if kind != "max":
        raise ValueError(f"unsupported pooling kind {kind!r}")
    if x.data.ndim != 4:
        raise ValueError(f"pool2 input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.data.shape
    if h == 0 or w == 0:
        raise ValueError("pool2 input has an empty spatial extent")
    ph, pw = h % 2, w % 2
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, ph), (0, pw)),
                    constant_values=POOL_PAD_VALUE)
    oh, ow = xp.shape[2] // 2, xp.shape[3] // 2
    windows = xp.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, oh, ow, 4)
    arg = flat.argmax(axis=-1)  # first occurrence wins ties
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dxp = dflat.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dxp = dxp.reshape(n, c, oh * 2, ow * 2)
        x._accumulate(dxp[:, :, :h, :w])

    return _node(out_data, (x,), backward)


def upsample2(x):
    """Nearest-neighbour 2x upsampling; pool2(upsample2(x)) == x."""
    if x.data.ndim != 4:
        raise ValueError(f"upsample2 input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _node(out_data, (x,), backward)


def global_avg_pool(x):
    """Mean over the spatial extent: [N, C, H, W] -> [N, C]."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.data.shape
    if h * w == 0:
        raise ValueError("global_avg_pool input has an empty spatial extent")

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _node(x.data.mean(axis=(2, 3)), (x,), backward)


def linear(x, weight, bias):
    """Dense layer: [N, D] @ [D, M] + [M]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError("linear expects 2-D input and weight")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(
            f"linear shape mismatch: input {x.shape} vs weight {weight.shape}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ValueError(f"bias must have shape ({weight.data.shape[1]},)")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), backward)


def grad_check(f, point, step=1e-6, tolerance=None):
    """Compare the analytic gradient of f at point against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1e-8,
    |analytic| + |numeric|). If tolerance is given, raises NumericError
    when the error exceeds it. f must map a Tensor to a scalar Tensor and
    be differentiable in a neighbourhood of the point.
    """
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point,
                        dtype=np.float64, copy=True), requires_grad=True)
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check requires f to return a scalar Tensor")
    out.backward()
    analytic = x.grad.ravel().copy()

    flat = x.data.ravel()
    numeric = np.empty_like(analytic)
    probe = Tensor(x.data)  # shares the buffer being perturbed
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(probe).data.item()
            flat[i] = orig - step
            f_minus = f(probe).data.item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)

    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise NumericError("non-finite values encountered during grad_check")
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    error = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    if tolerance is not None and error > tolerance:
        raise NumericError(f"gradient check failed: error {error:.3e} > {tolerance:.3e}")
    return error
