"""Minimal dense tensor engine with reverse-mode differentiation.

Graphs are built define-by-run: every op links its output to its parents
and records a backward closure. ``backward()`` on a scalar walks the tape
in reverse topological order. All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DataError, ShapeError

_GRAD_ENABLED = True

# Active allocation meters; every Tensor construction reports its bytes here.
_METERS: list = []


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prior = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prior
        return False


class allocation_meter:
    """Counts bytes of tensor data allocated while the context is active.

    Used by the serving layer as an activation high-water estimate.
    """

    def __init__(self):
        self.bytes = 0

    def add(self, n):
        self.bytes += n

    def __enter__(self):
        _METERS.append(self)
        return self

    def __exit__(self, *exc):
        _METERS.remove(self)
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        if _METERS:
            nbytes = self.data.nbytes
            for m in _METERS:
                m.add(nbytes)

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def assert_finite(self, what="tensor"):
        if not self.is_finite():
            raise DataError(f"{what} contains NaN or Inf")
        return self

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate grads of all reachable requires_grad tensors.

        Repeated calls without zeroing accumulate into existing grads.
        """
        if self.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, powi(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __pow__(self, p):
        return powi(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sqrt(self):
        return powi(self, 0.5)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _from_op(data, parents, backward):
    """Build the op output; links parents only while grad mode is on."""
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    out.requires_grad = rg
    if rg:
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ops ----------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _from_op(data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _from_op(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _from_op(data, (a, b), backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _from_op(-a.data, (a,), backward)


def powi(a, p):
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _from_op(data, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _from_op(a.data * mask, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * y * (1.0 - y))

    return _from_op(y, (a,), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op, a, b=None):
    """Strict pointwise op: shapes must match exactly, or b is a scalar.

    relu/scale are unary-style (scale takes a python scalar b).
    """
    a = _as_tensor(a)
    if op == "relu":
        return relu(a)
    if op == "scale":
        if isinstance(b, Tensor) or b is None:
            raise ShapeError("scale takes a python scalar")
        return mul(a, float(b))
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.size != 1:
            raise ShapeError(
                f"elementwise {op}: shapes {a.shape} and {b.shape} do not match "
                "(only scalar broadcast is supported)"
            )
    return _ELEMENTWISE[op](a, b)


# -- reductions and shape ops ---------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _from_op(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _from_op(data, (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _from_op(a.data.transpose(axes), (a,), backward)


# -- linear algebra -------------------------------------------------------------


def matmul(a, b):
    """Matrix product; supports leading batch dimensions on either side."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _from_op(data, (a, b), backward)


def softmax(x):
    """Numerically stable softmax along the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate(y * (g - dot))

    return _from_op(y, (x,), backward)


def log_softmax(x):
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - logz
    p = np.exp(out)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _from_op(out, (x,), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels over the batch.

    logits: [M, N]; labels: int array of length M with values in [0, N).
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    m, n = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {m}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise IndexError(f"label out of range [0, {n})")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    nll = logz - shifted[np.arange(m), labels]
    loss = nll.mean()

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted - logz[:, None])
            p[np.arange(m), labels] -= 1.0
            logits._accumulate(g * p / m)

    return _from_op(loss, (logits,), backward)


def embedding(table, ids):
    """Row gather from an embedding table; ids is an integer ndarray."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(gt)

    return _from_op(data, (table,), backward)


# -- convolution ------------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    """[B,C,H,W] -> cols [B, OH*OW, C*kh*kw] plus output spatial shape."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B,C,OH,OW,kh,kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad):
    """Scatter-add columns back to the (padded) input; inverse of _im2col."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xg = np.zeros((b, c, hp, wp))
    cols = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            xg[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, :, :, i, j
            ]
    if pad:
        xg = xg[:, :, pad : pad + h, pad : pad + w]
    return xg


def conv2d(x, weight, bias=None, stride=1, padding=0, stats_hook=None):
    """2-d convolution via im2col.

    x: [B,Cin,H,W]; weight: [Cout,Cin,kh,kw]; bias: [Cout] or None.
    stats_hook, when given, receives the raw column matrix [M, Cin*kh*kw]
    (used for calibration statistics; no gradient flows through it).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: {x.shape} vs {weight.shape}")
    cout, cin, kh, kw = weight.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    if stats_hook is not None:
        stats_hook(cols.reshape(-1, cin * kh * kw))
    b = x.shape[0]
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(cols, wmat.T)  # [B, OH*OW, Cout]
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(b, cout, oh, ow)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.reshape(b, cout, oh * ow).transpose(0, 2, 1)  # [B, P, Cout]
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=(0, 1)))
        if weight.requires_grad:
            gw = np.einsum("bpo,bpk->ok", gmat, cols)
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(gmat, wmat)  # [B, P, Cin*kh*kw]
            x._accumulate(_col2im(gcols, x.shape, kh, kw, stride, padding))

    return _from_op(out, parents, backward)
