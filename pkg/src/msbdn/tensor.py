"""Small reverse-mode autodiff engine over NCHW numpy arrays.

Only the operators the dehazing network needs are provided. Every op builds a
node holding its parents and a closure that maps the output gradient onto the
parents; ``Tensor.backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib

import numpy as np

LRELU_SLOPE = 0.2

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
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


def _topo_order(root):
    # iterative DFS; returns nodes with every consumer before its parents
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_rank4(name, t):
    if t.data.ndim != 4:
        raise ValueError(f"{name}: expected a rank-4 NCHW tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def lrelu(x):
    """Leaky ReLU with slope 0.2; the derivative at exactly 0 is taken as 1."""
    x = as_tensor(x)
    pos = x.data >= 0
    slope = np.where(pos, 1.0, LRELU_SLOPE).astype(x.dtype)
    return _make(x.data * slope, (x,), lambda g: (g * slope,))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def mse_loss(pred, target):
    """Mean of squared differences, returned as a 0-d tensor."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward(g):
        d = (2.0 / n) * diff * np.float64(g)
        return d.astype(pred.dtype), (-d).astype(target.dtype)

    return _make(value, (pred, target), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp, k, stride, out_h, out_w):
    """(N, C, Hp, Wp) -> (C*k*k, N*out_h*out_w) patch matrix."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, out_h, out_w), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xt[:, :, ki : ki + stride * (out_h - 1) + 1 : stride, kj : kj + stride * (out_w - 1) + 1 : stride]
    return cols.reshape(c * k * k, n * out_h * out_w)


def _col2im(cols, c, k, stride, n, out_h, out_w, full_h, full_w):
    """Adjoint of :func:`_im2col`: scatter-add patches into an (N, C, full_h, full_w) frame."""
    cols = cols.reshape(c, k, k, n, out_h, out_w)
    out = np.zeros((c, n, full_h, full_w), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * (out_h - 1) + 1 : stride, kj : kj + stride * (out_w - 1) + 1 : stride] += cols[:, ki, kj]
    return out.transpose(1, 0, 2, 3)


def _check_conv_args(op, x, weight, bias, in_axis):
    _check_rank4(op, x)
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"{op}: weight must be (*, *, k, k), got {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ValueError(f"{op}: input shape {x.shape} does not match weight shape {weight.shape}")
    out_c = weight.shape[1 - in_axis]
    if bias is not None and bias.shape != (out_c,):
        raise ValueError(f"{op}: bias shape {bias.shape} does not match weight shape {weight.shape}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation.  ``weight`` is (C_out, C_in, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _check_conv_args("conv2d", x, weight, bias, in_axis=1)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    c_out, c_in, k, _ = weight.shape
    n, _, h, w = x.shape
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"conv2d: input shape {x.shape} too small for weight shape {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, out_h, out_w)
    wm = weight.data.reshape(c_out, -1)
    out = (wm @ cols).reshape(c_out, n, out_h, out_w).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    hp, wp = xp.shape[2:]

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            full = _col2im(wm.T @ g2, c_in, k, stride, n, out_h, out_w, hp, wp)
            gx = full[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, backward)


def deconv2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution, the adjoint of :func:`conv2d` with the same weight.

    ``weight`` is (C_in, C_out, k, k), i.e. the conv2d weight whose adjoint this is.
    Output size is ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    _check_conv_args("deconv2d", x, weight, bias, in_axis=0)
    if stride not in (1, 2):
        raise ValueError(f"deconv2d: stride must be 1 or 2, got {stride}")
    if output_padding >= stride and output_padding > 0:
        raise ValueError("deconv2d: output_padding must be smaller than stride")
    c_in, c_out, k, _ = weight.shape
    n, _, h, w = x.shape
    out_h = (h - 1) * stride - 2 * padding + k + output_padding
    out_w = (w - 1) * stride - 2 * padding + k + output_padding
    # uncropped frame large enough to hold the output window [padding, padding + out)
    full_h = max((h - 1) * stride + k, padding + out_h)
    full_w = max((w - 1) * stride + k, padding + out_w)
    wm = weight.data.reshape(c_in, -1)
    x2 = x.data.transpose(1, 0, 2, 3).reshape(c_in, -1)
    full = _col2im(wm.T @ x2, c_out, k, stride, n, h, w, full_h, full_w)
    out = full[:, :, padding : padding + out_h, padding : padding + out_w]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((n, c_out, full_h, full_w), dtype=g.dtype)
        gfull[:, :, padding : padding + out_h, padding : padding + out_w] = g
        gcols = _im2col(gfull, k, stride, h, w)
        gx = (wm @ gcols).reshape(c_in, n, h, w).transpose(1, 0, 2, 3) if x.requires_grad else None
        gw = (x2 @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, backward)


def residual_block(x, w1, b1, w2, b2):
    """x + conv(lrelu(conv(x))) with two 3x3 same-padded convolutions."""
    x = as_tensor(x)
    if x.shape[1] != as_tensor(w1).shape[1]:
        raise ValueError(f"residual_block: input shape {x.shape} does not match weight shape {as_tensor(w1).shape}")
    k = as_tensor(w1).shape[2]
    h = lrelu(conv2d(x, w1, b1, stride=1, padding=k // 2))
    return add(x, conv2d(h, w2, b2, stride=1, padding=k // 2))
