"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the segmentation model needs are implemented. Every op
records a backward closure; `backward(loss)` walks the tape in reverse
topological order. Ops preserve the input dtype, so a model built in float64
is differentiated in float64 (the gradient audit relies on this).
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    """A numpy array plus an optional place on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Backpropagate from a scalar tensor through the recorded tape."""
    if loss.data.size != 1:
        raise ValueError("backward() expects a scalar loss")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), back)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), back)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), back)


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data / b.data

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), back)


def neg(a):
    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back)


def pow_const(a, p):
    out_data = a.data ** p

    def back(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(out_data, (a,), back)


def sqrt(a):
    return pow_const(a, 0.5)


def exp(a):
    out_data = np.exp(a.data)

    def back(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), back)


def log(a):
    out_data = np.log(a.data)

    def back(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), back)


def relu(a):
    mask = a.data > 0
    out_data = np.where(mask, a.data, np.zeros((), dtype=a.dtype))

    def back(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), back)


def tanh(a):
    out_data = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), back)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def back(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), back)


def gelu(a):
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * phi

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accum(a, g * (phi + x * pdf))

    return _make(out_data.astype(a.dtype, copy=False), (a,), back)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    # always materialize: views would make downstream reduction order (and so
    # last-ulp results) depend on upstream memory layout, breaking bit-identity
    out_data = np.ascontiguousarray(a.data.reshape(shape))

    def back(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), back)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def back(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(out_data, (a,), back)


def concat(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), back)


# ---------------------------------------------------------------------------
# reductions / linear algebra

def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(out_data, (a,), back)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    out_data = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), back)


def softmax(a, axis=-1):
    shift = a.data.max(axis=axis, keepdims=True)
    e = exp(sub(a, Tensor(shift)))
    return div(e, tsum(e, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# spatial ops (NCHW)

def _im2col(xp, kh, kw, sh, sw):
    # xp: padded input (B, C, Hp, Wp) -> cols (B, OH, OW, C*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, :, :]                      # (B, C, OH, OW, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5)                 # (B, OH, OW, C, kh, kw)
    b, oh, ow = cols.shape[:3]
    return np.ascontiguousarray(cols).reshape(b, oh, ow, -1), oh, ow


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D convolution, weight layout (Cout, Cin, kh, kw)."""
    sh = sw = stride
    cout, cin, kh, kw = w.data.shape
    if x.data.shape[1] != cin:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.data.shape[1]} channels, weight expects {cin}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, oh, ow = _im2col(xp, kh, kw, sh, sw)
    wmat = w.data.reshape(cout, -1)
    # transposed *views* make BLAS results depend on the row count; keep the
    # operand contiguous so eval outputs are invariant to batch packing
    out = np.matmul(cols.reshape(-1, cols.shape[-1]), np.ascontiguousarray(wmat.T))
    out = out.reshape(x.data.shape[0], oh, ow, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        bsz = x.data.shape[0]
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)     # (B*OH*OW, Cout)
        if w.requires_grad:
            gw = np.matmul(gmat.T, cols.reshape(-1, cols.shape[-1]))
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(gmat, wmat)                    # (B*OH*OW, Cin*kh*kw)
            dcols = dcols.reshape(bsz, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            hp = x.data.shape[2] + 2 * pad
            wp = x.data.shape[3] + 2 * pad
            dxp = np.zeros((bsz, cin, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += dcols[:, :, :, :, i, j]
            if pad:
                dxp = dxp[:, :, pad:-pad, pad:-pad]
            _accum(x, dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back)


def conv_transpose2x2(x, w, b=None):
    """Transposed convolution, kernel 2 stride 2 (exact 2x upsampling).

    Weight layout (Cin, Cout, 2, 2); blocks do not overlap, so each input
    pixel maps linearly onto one 2x2 output tile.
    """
    cin, cout = w.data.shape[0], w.data.shape[1]
    if x.data.shape[1] != cin:
        raise ValueError(
            f"conv_transpose2x2 channel mismatch: input has {x.data.shape[1]} channels, weight expects {cin}"
        )
    bsz, _, h, wd = x.data.shape
    t = np.tensordot(x.data, w.data, axes=([1], [0]))        # (B, H, W, Cout, 2, 2)
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(bsz, cout, 2 * h, 2 * wd)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gt = g.reshape(bsz, cout, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5)  # (B,H,W,Cout,2,2)
        if x.requires_grad:
            gx = np.tensordot(gt, w.data, axes=([3, 4, 5], [1, 2, 3]))      # (B,H,W,Cin)
            _accum(x, np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))
        if w.requires_grad:
            gw = np.tensordot(x.data, gt, axes=([0, 2, 3], [0, 1, 2]))      # (Cin,Cout,2,2)
            _accum(w, gw)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back)


def avgpool2x2(x):
    bsz, c, h, wd = x.data.shape
    if h % 2 or wd % 2:
        raise ValueError(f"avgpool2x2 needs even spatial dims, got {h}x{wd}")
    r = x.data.reshape(bsz, c, h // 2, 2, wd // 2, 2)
    out = r.mean(axis=(3, 5))

    def back(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.data.dtype.type(0.25)
        _accum(x, gx)

    return _make(out, (x,), back)


def maxpool2x2(x):
    bsz, c, h, wd = x.data.shape
    if h % 2 or wd % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{wd}")
    r = x.data.reshape(bsz, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(r).reshape(bsz, c, h // 2, wd // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(bsz, c, h // 2, wd // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, gx.reshape(bsz, c, h, wd))

    return _make(out, (x,), back)


def _interp_taps(n_in, scale):
    """Per-output-row source taps for scale-factor interpolation (half-pixel centers)."""
    i = np.arange(n_in * scale)
    src = (i + 0.5) / scale - 0.5
    i0 = np.floor(src).astype(int)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, t


def _interp_matrix(lo, hi, t, n_in, dtype):
    m = np.zeros((lo.size, n_in), dtype=np.float64)
    rows = np.arange(lo.size)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    return m.astype(dtype)


def upsample_bilinear(x, scale):
    """Bilinear upsampling by an integer factor, corner alignment disabled.

    Forward uses the lo + t*(hi - lo) form so constant maps are reproduced
    bit-exactly.
    """
    bsz, c, h, wd = x.data.shape
    lo_h, hi_h, t_h = _interp_taps(h, scale)
    lo_w, hi_w, t_w = _interp_taps(wd, scale)
    th = t_h.astype(x.data.dtype)[None, None, :, None]
    tw = t_w.astype(x.data.dtype)[None, None, None, :]
    xlo = x.data[:, :, lo_h, :]
    y1 = xlo + th * (x.data[:, :, hi_h, :] - xlo)
    ylo = y1[:, :, :, lo_w]
    out = ylo + tw * (y1[:, :, :, hi_w] - ylo)

    def back(g):
        mh = _interp_matrix(lo_h, hi_h, t_h, h, x.data.dtype)
        mw = _interp_matrix(lo_w, hi_w, t_w, wd, x.data.dtype)
        t1 = np.einsum("pw,bcop->bcow", mw, g)
        gx = np.einsum("oh,bcow->bchw", mh, t1)
        _accum(x, np.ascontiguousarray(gx))

    return _make(np.ascontiguousarray(out), (x,), back)
