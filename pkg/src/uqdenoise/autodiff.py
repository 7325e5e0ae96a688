"""Minimal dense-tensor autodiff engine.

Arrays are channels-first with spatial dimensions last. Every op records
its backward closure on the output tensor; calling ``backward()`` on a
scalar loss replays the graph in reverse topological order and accumulates
gradients into the leaves that were created with ``requires_grad=True``.

Only the operations the networks need are provided: dilated convolution
(2D/3D, zero-padded "same"), channel concatenation, ReLU, per-pixel affine
layers, softplus, clamping, a handful of arithmetic ops and the pinball
loss.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent; names the offending axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        t = Tensor(self.data)
        return t

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None:
                node._backward(node.grad)
            # free intermediate grads as we go; leaves keep theirs
            if node._parents:
                node.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"


def _toposort(root):
    """Reverse topological order (root first), iterative to spare the stack."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order[::-1]


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        _acc(a, g * s)

    return _make(a.data * s, (a,), backward)


def _acc(t, g):
    if t.requires_grad or t._parents:
        t._accumulate(g)


# ---------------------------------------------------------------------------
# activations


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _acc(x, g * mask)

    # np.maximum rather than np.where so NaN inputs propagate instead of
    # being silently flushed to zero
    return _make(np.maximum(x.data, 0), (x,), backward)


def softplus(x):
    """ln(1 + e^x), computed as max(x, 0) + log1p(exp(-|x|)) for stability."""
    x = _as_tensor(x)
    out = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _acc(x, g * sig)

    return _make(out, (x,), backward)


def clamp(x, lo, hi):
    """Elementwise clip; gradient passes through inside [lo, hi] (inclusive)."""
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _acc(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


# ---------------------------------------------------------------------------
# structural


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if len(t.shape) != len(base):
            raise ShapeError(f"concat: operand {i} rank {len(t.shape)} != {len(base)}")
        for ax in range(len(base)):
            if ax != axis and t.shape[ax] != base[ax]:
                raise ShapeError(
                    f"concat: operand {i} extent {t.shape[ax]} != {base[ax]} on axis {ax}",
                    axis=ax,
                )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp, ksize, dilation, out_spatial):
    """Gather kernel taps of a padded array into a (Cin*k^n, prod(spatial)) matrix."""
    cin = xp.shape[0]
    taps = []
    if len(out_spatial) == 2:
        h, w = out_spatial
        for i in range(ksize):
            for j in range(ksize):
                taps.append(xp[:, i * dilation:i * dilation + h, j * dilation:j * dilation + w])
    else:
        d, h, w = out_spatial
        for i in range(ksize):
            for j in range(ksize):
                for l in range(ksize):
                    taps.append(
                        xp[:, i * dilation:i * dilation + d,
                           j * dilation:j * dilation + h,
                           l * dilation:l * dilation + w]
                    )
    n = int(np.prod(out_spatial))
    return np.stack(taps, axis=1).reshape(cin * len(taps), n)


def conv(x, kernel, bias=None, dilation=1, spatial_rank=2):
    """Zero-padded "same" dilated convolution (cross-correlation).

    ``x`` is (Cin, *spatial), ``kernel`` is (Cout, Cin, *[k]*spatial_rank) with
    k odd (1 or 3 in practice). Output spatial extents equal the input's.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if spatial_rank not in (2, 3):
        raise ValueError(f"spatial_rank must be 2 or 3, got {spatial_rank}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if x.data.ndim != spatial_rank + 1:
        raise ShapeError(
            f"conv: input rank {x.data.ndim} incompatible with spatial_rank {spatial_rank}")
    if kernel.data.ndim != spatial_rank + 2:
        raise ShapeError(
            f"conv: kernel rank {kernel.data.ndim} incompatible with spatial_rank {spatial_rank}")
    cout, cin = kernel.shape[:2]
    if cin != x.shape[0]:
        raise ShapeError(
            f"conv: input has {x.shape[0]} channels, kernel expects {cin}", axis=0)
    ksize = kernel.shape[2]
    if any(k != ksize for k in kernel.shape[2:]):
        raise ShapeError("conv: kernel must be square/cubic")
    if ksize % 2 == 0:
        raise ShapeError("conv: kernel size must be odd")

    spatial = x.shape[1:]
    pad = dilation * (ksize - 1) // 2
    padding = [(0, 0)] + [(pad, pad)] * spatial_rank
    xp = np.pad(x.data, padding)
    cols = _im2col(xp, ksize, dilation, spatial)
    wmat = kernel.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv: bias shape {bias.shape} != ({cout},)", axis=0)
        out = out + bias.data[:, None]
    out = out.reshape((cout,) + spatial)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gf = g.reshape(cout, -1)
        if kernel.requires_grad or kernel._parents:
            _acc(kernel, (gf @ cols.T).reshape(kernel.shape))
        if bias is not None and (bias.requires_grad or bias._parents):
            _acc(bias, gf.sum(axis=1))
        if x.requires_grad or x._parents:
            gcols = (wmat.T @ gf).reshape((cin, ksize ** spatial_rank, -1))
            gxp = np.zeros_like(xp)
            t = 0
            if spatial_rank == 2:
                h, w = spatial
                for i in range(ksize):
                    for j in range(ksize):
                        gxp[:, i * dilation:i * dilation + h,
                            j * dilation:j * dilation + w] += gcols[:, t].reshape(cin, h, w)
                        t += 1
                gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
            else:
                d, h, w = spatial
                for i in range(ksize):
                    for j in range(ksize):
                        for l in range(ksize):
                            gxp[:, i * dilation:i * dilation + d,
                                j * dilation:j * dilation + h,
                                l * dilation:l * dilation + w] += gcols[:, t].reshape(cin, d, h, w)
                            t += 1
                gx = gxp[:, pad:pad + d, pad:pad + h, pad:pad + w] if pad else gxp
            _acc(x, gx)

    return _make(out, parents, backward)


def affine(x, weight, bias=None):
    """Per-pixel linear layer: (Cout, Cin) weight applied over the channel axis."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    cout, cin = weight.shape
    if x.shape[0] != cin:
        raise ShapeError(
            f"affine: input has {x.shape[0]} channels, weight expects {cin}", axis=0)
    spatial = x.shape[1:]
    xf = x.data.reshape(cin, -1)
    out = weight.data @ xf
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"affine: bias shape {bias.shape} != ({cout},)", axis=0)
        out = out + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.reshape(cout, -1)
        if weight.requires_grad or weight._parents:
            _acc(weight, gf @ xf.T)
        if bias is not None and (bias.requires_grad or bias._parents):
            _acc(bias, gf.sum(axis=1))
        if x.requires_grad or x._parents:
            _acc(x, (weight.data.T @ gf).reshape(x.shape))

    return _make(out.reshape((cout,) + spatial), parents, backward)


# ---------------------------------------------------------------------------
# loss


def pinball_loss(pred, target, q):
    """Mean pinball loss at level ``q``: max(q*r, (q-1)*r) with r = target - pred.

    Subgradient at r == 0 is taken as 0. Differentiable w.r.t. ``pred`` only;
    ``target`` is treated as constant data.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    pred = _as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeError(f"pinball_loss: shapes {pred.shape} and {target.shape} differ")
    r = target - pred.data
    loss = np.mean(np.maximum(q * r, (q - 1.0) * r))
    n = r.size

    def backward(g):
        # dL/dpred = -q where r > 0, -(q-1) where r < 0, 0 at r == 0
        gr = np.where(r > 0, -q, np.where(r < 0, 1.0 - q, 0.0))
        _acc(pred, g * gr.astype(pred.dtype) / n)

    return _make(np.asarray(loss), (pred,), backward)


def mean(x):
    x = _as_tensor(x)
    n = x.data.size

    def backward(g):
        _acc(x, np.full_like(x.data, g / n))

    return _make(np.asarray(x.data.mean()), (x,), backward)
