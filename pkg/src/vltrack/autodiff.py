"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The graph is a dynamic tape: every operation records its parents and a
backward closure, and the tape is rebuilt on each forward pass.  All values
are 64-bit floats so that gradients can be verified against central finite
differences at tight tolerances.

Conventions:
  * image features are laid out (batch, channels, height, width)
  * token features are laid out (batch, tokens, dim)
  * ``backward()`` may be called once per graph, on a scalar tensor
"""

from __future__ import annotations

import numpy as np

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Enable NaN/Inf detection on every op output (raises on violation)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class AutodiffError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    """Raised when shapes or settings cannot form a valid computation."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array participating in the gradient tape."""

    def __init__(self, data, requires_grad: bool = False,
                 parents=(), backward_fn=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._op = op
        if _debug_checks and not np.all(np.isfinite(self.data)):
            raise AutodiffError(f"non-finite values produced by op '{op or 'leaf'}'")

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"

    # -- graph machinery ----------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every requires_grad ancestor."""
        if self.data.size != 1:
            raise AutodiffError(f"backward() requires a scalar, got shape {self.shape}")
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
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        if _debug_checks:
            for node in topo:
                if node.grad is not None and not np.all(np.isfinite(node.grad)):
                    raise AutodiffError(f"non-finite gradient at op '{node._op or 'leaf'}'")

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents, backward_fn, op):
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires,
                  parents=parents if requires else (),
                  backward_fn=backward_fn if requires else None, op=op)


# -- elementwise ops ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward, "div")


def power(a, exponent: float):
    a = as_tensor(a)
    out_data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), backward, "pow")


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward, "log")


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward, "sqrt")


def sigmoid(a):
    a = as_tensor(a)
    # stable in both tails
    out_data = np.where(a.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(out_data, (a,), backward, "relu")


def softplus(a):
    """log(1 + exp(x)), stable for large |x|."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        if a.requires_grad:
            s = np.where(a.data >= 0,
                         1.0 / (1.0 + np.exp(-np.abs(a.data))),
                         np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
            a._accumulate(g * s)

    return _make(out_data, (a,), backward, "softplus")


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.maximum(a.data, b.data)

    def backward(g):
        # ties route to the first operand
        take_a = a.data >= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _make(out_data, (a, b), backward, "maximum")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.minimum(a.data, b.data)

    def backward(g):
        take_a = a.data <= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return _make(out_data, (a, b), backward, "minimum")


# -- reductions ---------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reduce_max(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        out_b = a.data.max(axis=axis, keepdims=True)
        if axis is None:
            g_full = np.broadcast_to(g, a.shape)
        else:
            g_full = np.broadcast_to(g if keepdims else np.expand_dims(g, axis), a.shape)
        mask = (a.data == out_b)
        # split ties evenly so the subgradient stays bounded
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        a._accumulate(g_full * mask / counts)

    return _make(out_data, (a,), backward, "max")


# -- shape ops ----------------------------------------------------------------

def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)
    in_shape = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(in_shape))

    return _make(out_data, (a,), backward, "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out_data = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(out_data, (a,), backward, "transpose")


def getitem(a, index):
    a = as_tensor(a)
    out_data = a.data[index]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

    return _make(out_data, (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out_data, tuple(tensors), backward, "concat")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward, "matmul")


def embedding(weight, ids):
    """Row gather: ``weight[ids]`` with scatter-add backward."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = weight.data[ids]

    def backward(g):
        if weight.requires_grad:
            full = np.zeros_like(weight.data)
            np.add.at(full, ids, g)
            weight._accumulate(full)

    return _make(out_data, (weight,), backward, "embedding")


# -- softmax ------------------------------------------------------------------

def softmax(a, axis=-1):
    """Numerically stabilized softmax along ``axis`` (max subtraction)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward, "softmax")


# -- convolution --------------------------------------------------------------

def _conv_out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, stride: int = 1, padding: int = 0, groups: int = 1):
    """2D convolution on (B, C, H, W) input.

    ``weight`` has shape (C_out, C_in // groups, kh, kw).  Depthwise
    convolution is groups == C_in with one (or more) filters per channel.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(
            f"conv2d expects 4D input/weight, got {x.shape} and {weight.shape}")
    b, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if c_in % groups != 0 or c_out % groups != 0 or c_in_g != c_in // groups:
        raise ConfigurationError(
            f"conv2d group mismatch: input channels {c_in}, weight {weight.shape}, groups {groups}")
    out_h = _conv_out_size(h, kh, stride, padding)
    out_w = _conv_out_size(w, kw, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(
            f"conv2d output collapsed: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ph, pw = xp.shape[2], xp.shape[3]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, out_h, out_w, kh, kw)
    cg = c_in // groups
    og = c_out // groups
    # cols: (B, groups, cg*kh*kw, out_h*out_w)
    cols = windows.reshape(b, groups, cg, out_h, out_w, kh, kw)
    cols = cols.transpose(0, 1, 2, 5, 6, 3, 4).reshape(b, groups, cg * kh * kw, out_h * out_w)
    w_mat = weight.data.reshape(groups, og, cg * kh * kw)
    out_data = np.matmul(w_mat, cols).reshape(b, c_out, out_h, out_w)

    def backward(g):
        g_mat = g.reshape(b, groups, og, out_h * out_w)
        if weight.requires_grad:
            gw = np.matmul(g_mat, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            weight._accumulate(gw.reshape(c_out, cg, kh, kw))
        if x.requires_grad:
            gcols = np.matmul(w_mat.transpose(0, 2, 1), g_mat)  # (B, groups, cg*kh*kw, L)
            gxp = np.zeros((b, c_in, ph, pw))
            gcols = gcols.reshape(b, groups, cg, kh, kw, out_h, out_w)
            gcols = gcols.reshape(b, c_in, kh, kw, out_h, out_w)
            oh_idx = np.arange(out_h) * stride
            ow_idx = np.arange(out_w) * stride
            for i in range(kh):
                for j in range(kw):
                    np.add.at(gxp, (slice(None), slice(None),
                                    oh_idx[:, None] + i, ow_idx[None, :] + j),
                              gcols[:, :, i, j])
            if padding:
                gxp = gxp[:, :, padding:ph - padding, padding:pw - padding]
            x._accumulate(gxp)

    return _make(out_data, (x, weight), backward, "conv2d")


# -- resize -------------------------------------------------------------------

def bilinear_resize(x, out_h: int, out_w: int):
    """Bilinear resize of (B, C, H, W) using half-pixel sample centers."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"bilinear_resize target must be >= 1, got {out_h}x{out_w}")
    b, c, h, w = x.shape

    def _coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        lo = np.minimum(lo, n_in - (2 if n_in > 1 else 1))
        frac = src - lo
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, frac

    y0, y1, fy = _coords(h, out_h)
    x0, x1, fx = _coords(w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    d = x.data
    out_data = (d[:, :, y0[:, None], x0[None, :]] * (1 - fy) * (1 - fx)
                + d[:, :, y0[:, None], x1[None, :]] * (1 - fy) * fx
                + d[:, :, y1[:, None], x0[None, :]] * fy * (1 - fx)
                + d[:, :, y1[:, None], x1[None, :]] * fy * fx)

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), y0[:, None], x0[None, :]), g * (1 - fy) * (1 - fx))
        np.add.at(gx, (slice(None), slice(None), y0[:, None], x1[None, :]), g * (1 - fy) * fx)
        np.add.at(gx, (slice(None), slice(None), y1[:, None], x0[None, :]), g * fy * (1 - fx))
        np.add.at(gx, (slice(None), slice(None), y1[:, None], x1[None, :]), g * fy * fx)
        x._accumulate(gx)

    return _make(out_data, (x,), backward, "bilinear_resize")
