"""Primitive operations with matching backward passes.

Everything here works on plain NHWC ndarrays and is stateless; layer
classes add parameter storage and caching on top. Backward functions take
the upstream gradient plus whatever forward inputs they need and return
gradients in the same order as the inputs.
"""

import numpy as np

from . import kernels
from .tensor import ConvWeights, ShapeError, check_nhwc


# ---------------------------------------------------------------- padding

def same_pads(k):
    """Zero-padding (before, after) totaling k-1, extra pixel after."""
    return (k - 1) // 2, k // 2


def conv_out_dim(length, k, stride, padding):
    if padding == "same":
        return (length - 1) // stride + 1
    if length < k:
        raise ShapeError(f"window {k} exceeds input extent {length}")
    return (length - k) // stride + 1


def _pad_input(x, kh, kw, padding):
    if padding == "valid":
        return x
    if padding != "same":
        raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")
    ht, hb = same_pads(kh)
    wl, wr = same_pads(kw)
    if ht == hb == wl == wr == 0:
        return x
    return np.pad(x, ((0, 0), (ht, hb), (wl, wr), (0, 0)))


def reflect_index(length, pad):
    """Source indices for reflect padding an axis of the given length.

    Length-1 axes have no reflection; the single sample is replicated.
    """
    pos = np.arange(-pad, length + pad)
    if length == 1:
        return np.zeros(pos.shape, dtype=np.intp)
    period = 2 * length - 2
    m = np.mod(pos, period)
    return np.where(m < length, m, period - m).astype(np.intp)


def reflect_pad(x, ph, pw):
    ih = reflect_index(x.shape[1], ph)
    iw = reflect_index(x.shape[2], pw)
    return x[:, ih][:, :, iw]


def _fold_axis(d, idx, length, axis):
    dm = np.moveaxis(d, axis, 0)
    out = np.zeros((length,) + dm.shape[1:], dtype=d.dtype)
    np.add.at(out, idx, dm)
    return np.moveaxis(out, 0, axis)


def reflect_pad_backward(dxp, h, w, ph, pw):
    dx = _fold_axis(dxp, reflect_index(h, ph), h, 1)
    return _fold_axis(dx, reflect_index(w, pw), w, 2)


# ------------------------------------------------------------ convolution

def _kernel_bias(w):
    if isinstance(w, ConvWeights):
        return w.kernel, w.bias
    return w, None


def conv2d(x, w, stride=1, padding="same", bias=None):
    """Standard convolution. w: (kh,kw,C_in,C_out) array or ConvWeights."""
    check_nhwc(x, "conv2d input")
    kern, wbias = _kernel_bias(w)
    if bias is None:
        bias = wbias
    if kern.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4D, got {kern.shape}")
    if kern.shape[2] != x.shape[3]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[3]}, "
            f"kernel expects {kern.shape[2]}"
        )
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        conv_out_dim(x.shape[1], kern.shape[0], stride, padding)
        conv_out_dim(x.shape[2], kern.shape[1], stride, padding)
    xp = _pad_input(x, kern.shape[0], kern.shape[1], padding)
    y = kernels.get().conv2d(xp, kern, stride)
    if bias is not None:
        y = y + bias
    return y


def conv2d_backward(dy, x, w, stride=1, padding="same", has_bias=False):
    """Returns (dx, dw, db); db is None without a bias."""
    kern, _ = _kernel_bias(w)
    kh, kw = kern.shape[0], kern.shape[1]
    xp = _pad_input(x, kh, kw, padding)
    back = kernels.get()
    dxp = back.conv2d_dx(dy, kern, stride, xp.shape[1], xp.shape[2])
    dw = back.conv2d_dw(xp, dy, stride, kh, kw)
    if padding == "same":
        ht, _ = same_pads(kh)
        wl, _ = same_pads(kw)
        dx = dxp[:, ht : ht + x.shape[1], wl : wl + x.shape[2], :]
    else:
        dx = dxp
    db = dy.sum(axis=(0, 1, 2)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


def depthwise_conv(x, w, stride=1, padding="same", bias=None):
    """Per-channel convolution. w: (kh,kw,C) array or ConvWeights (kh,kw,C,1)."""
    check_nhwc(x, "depthwise input")
    kern, wbias = _kernel_bias(w)
    if bias is None:
        bias = wbias
    if kern.ndim == 4:
        if kern.shape[3] != 1:
            raise ShapeError(f"depthwise kernel needs C_out=1, got {kern.shape}")
        kern = kern[..., 0]
    if kern.shape[2] != x.shape[3]:
        raise ShapeError(
            f"depthwise channel mismatch: input {x.shape[3]}, kernel {kern.shape[2]}"
        )
    xp = _pad_input(x, kern.shape[0], kern.shape[1], padding)
    y = kernels.get().depthwise(xp, kern, stride)
    if bias is not None:
        y = y + bias
    return y


def depthwise_conv_backward(dy, x, w, stride=1, padding="same", has_bias=False):
    kern, _ = _kernel_bias(w)
    if kern.ndim == 4:
        kern = kern[..., 0]
    kh, kw = kern.shape[0], kern.shape[1]
    xp = _pad_input(x, kh, kw, padding)
    back = kernels.get()
    dxp = back.depthwise_dx(dy, kern, stride, xp.shape[1], xp.shape[2])
    dw = back.depthwise_dw(xp, dy, stride, kh, kw)
    if padding == "same":
        ht, _ = same_pads(kh)
        wl, _ = same_pads(kw)
        dx = dxp[:, ht : ht + x.shape[1], wl : wl + x.shape[2], :]
    else:
        dx = dxp
    db = dy.sum(axis=(0, 1, 2)) if has_bias else None
    return np.ascontiguousarray(dx), dw, db


def depthwise_separable_conv(x, dw, pw):
    """Depthwise pass followed by a 1x1 cross-channel convolution.

    dw: ConvWeights (k,k,C,1); pw: ConvWeights (1,1,C,C_out).
    """
    pk, _ = _kernel_bias(pw)
    if pk.shape[0] != 1 or pk.shape[1] != 1:
        raise ShapeError(f"pointwise kernel must be 1x1, got {pk.shape[:2]}")
    mid = depthwise_conv(x, dw)
    if pk.shape[2] != mid.shape[3]:
        raise ShapeError(
            f"separable channel mismatch: depthwise gives {mid.shape[3]}, "
            f"pointwise expects {pk.shape[2]}"
        )
    return conv2d(mid, pw)


def separable_reduction_factor(k_f, d_o, k_denominator=None):
    """Multiply-count ratio of a standard conv over its separable split.

    The denominator uses k_f^2 unless an alternative k is supplied, in
    which case k^2 is used; the counter reports both readings.
    """
    denom = (k_f if k_denominator is None else k_denominator) ** 2
    return (k_f * k_f * d_o) / (denom + d_o)


# ------------------------------------------------------------ activations

def _sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _tanh_softplus(x):
    # softplus overflows past ~700; above 20 it already equals x to 1 ulp
    sp = np.where(x > 20.0, x, np.log1p(np.exp(np.minimum(x, 20.0))))
    return np.tanh(sp)


def mish(x):
    """x * tanh(softplus(x)), numerically stable for large |x|."""
    return x * _tanh_softplus(x)


def mish_backward(dy, x):
    t = _tanh_softplus(x)
    return dy * (t + x * (1.0 - t * t) * _sigmoid(x))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return np.where(x > 0, dy, np.zeros((), dtype=dy.dtype))


ACTIVATIONS = {"mish": (mish, mish_backward), "relu": (relu, relu_backward)}


# ----------------------------------------------------------------- softmax

def softmax_rows(m):
    """Row-wise softmax of a 2D matrix with max-subtraction."""
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {m.shape}")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(da, a):
    inner = (da * a).sum(axis=1, keepdims=True)
    return a * (da - inner)


# -------------------------------------------------------------- batch norm

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm(x, gamma, beta, running_stats, mode="train",
               eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalization over (N,H,W).

    Train mode normalizes by batch statistics (biased variance) and updates
    running_stats in place: r <- momentum*r + (1-momentum)*batch. Infer mode
    normalizes by the running statistics. Returns (y, cache).
    """
    check_nhwc(x, "batch_norm input")
    c = x.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if mode == "train":
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        running_stats["mean"][...] = momentum * running_stats["mean"] + (1 - momentum) * mu
        running_stats["var"][...] = momentum * running_stats["var"] + (1 - momentum) * var
    elif mode == "infer":
        mu = running_stats["mean"].astype(x.dtype)
        var = running_stats["var"].astype(x.dtype)
    else:
        raise ShapeError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = gamma * xhat + beta
    m = x.shape[0] * x.shape[1] * x.shape[2]
    return y, (xhat, inv.astype(x.dtype), gamma, m, mode)


def batch_norm_backward(dy, cache):
    xhat, inv, gamma, m, mode = cache
    dbeta = dy.sum(axis=(0, 1, 2))
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dxhat = dy * gamma
    if mode == "infer":
        return dxhat * inv, dgamma, dbeta
    dx = (inv / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 1, 2))
        - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
    )
    return dx, dgamma, dbeta


# ------------------------------------------------------------------ concat

def concat_channels(xs):
    """Channel-wise concatenation; input i occupies the i-th channel span."""
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for x in xs:
        check_nhwc(x, "concat_channels input")
    base = xs[0].shape[:3]
    for i, x in enumerate(xs[1:], 1):
        if x.shape[:3] != base:
            raise ShapeError(
                f"concat_channels spatial mismatch: input 0 is {base}, "
                f"input {i} is {x.shape[:3]}"
            )
    return np.concatenate(xs, axis=3)


def split_channels(d, sizes):
    """Inverse of concat_channels on the gradient side."""
    edges = np.cumsum(sizes)[:-1]
    return np.split(d, edges, axis=3)


# ----------------------------------------------------------------- pooling

def pool_out_dim(length, k, stride, ceil_mode):
    if k > length:
        raise ShapeError(f"pooling window {k} exceeds input extent {length}")
    if ceil_mode:
        return -((length - k) // -stride) + 1
    return (length - k) // stride + 1


def _pool_windows(h, w, k, stride, ceil_mode):
    ho = pool_out_dim(h, k, stride, ceil_mode)
    wo = pool_out_dim(w, k, stride, ceil_mode)
    rows = [(i * stride, min(i * stride + k, h)) for i in range(ho)]
    cols = [(j * stride, min(j * stride + k, w)) for j in range(wo)]
    return rows, cols


def avg_pool(x, k, stride, ceil_mode=False):
    """Windowed mean; ceil mode clips trailing windows to the valid region."""
    check_nhwc(x, "avg_pool input")
    n, h, w, c = x.shape
    rows, cols = _pool_windows(h, w, k, stride, ceil_mode)
    y = np.empty((n, len(rows), len(cols), c), dtype=x.dtype)
    for i, (h0, h1) in enumerate(rows):
        for j, (w0, w1) in enumerate(cols):
            y[:, i, j, :] = x[:, h0:h1, w0:w1, :].mean(axis=(1, 2))
    return y


def avg_pool_backward(dy, x_shape, k, stride, ceil_mode=False):
    n, h, w, c = x_shape
    rows, cols = _pool_windows(h, w, k, stride, ceil_mode)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i, (h0, h1) in enumerate(rows):
        for j, (w0, w1) in enumerate(cols):
            area = (h1 - h0) * (w1 - w0)
            dx[:, h0:h1, w0:w1, :] += dy[:, i : i + 1, j : j + 1, :] / area
    return dx


def max_pool(x, k, stride, ceil_mode=False):
    """Windowed maximum."""
    check_nhwc(x, "max_pool input")
    n, h, w, c = x.shape
    rows, cols = _pool_windows(h, w, k, stride, ceil_mode)
    y = np.empty((n, len(rows), len(cols), c), dtype=x.dtype)
    for i, (h0, h1) in enumerate(rows):
        for j, (w0, w1) in enumerate(cols):
            y[:, i, j, :] = x[:, h0:h1, w0:w1, :].max(axis=(1, 2))
    return y


def max_pool_backward(dy, x, k, stride, ceil_mode=False):
    # routes each window's gradient to the first-scan maximum, so ties
    # break the same way every run
    n, h, w, c = x.shape
    rows, cols = _pool_windows(h, w, k, stride, ceil_mode)
    dx = np.zeros_like(x, dtype=dy.dtype)
    ni = np.arange(n)[:, None]
    ci = np.arange(c)[None, :]
    for i, (h0, h1) in enumerate(rows):
        for j, (w0, w1) in enumerate(cols):
            win = x[:, h0:h1, w0:w1, :].reshape(n, -1, c)
            idx = win.argmax(axis=1)
            dflat = np.zeros(win.shape, dtype=dy.dtype)
            dflat[ni, idx, ci] = dy[:, i, j, :]
            dx[:, h0:h1, w0:w1, :] += dflat.reshape(n, h1 - h0, w1 - w0, c)
    return dx
