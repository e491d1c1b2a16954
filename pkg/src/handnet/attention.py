"""Multi-head self-attention over flattened spatial positions.

Positions are flattened row-major to an HW x F_in matrix; every head adds
2D relative position terms to its content logits: entry (i, j) picks the
learned embedding for the width offset j_x - i_x and height offset
j_y - i_y, so the tables span 2W-1 and 2H-1 offsets. Content and relative
terms share one 1/sqrt(d_k_head) scale inside the softmax.

Two evaluation paths coexist on purpose. The functional ops here reduce
rows with math.fsum, which is order-invariant, so permuting input rows
permutes the output bit-exactly (with zero embeddings); they are the
reference semantics and run at toy sizes. The layer at the bottom batches
the same math through BLAS for the network hot path and agrees with the
functional path to float round-off.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .layers import Conv2D, Module, uniform_init
from .tensor import ConfigError, ShapeError, check_nhwc


@dataclass
class AttentionParams:
    n_h: int
    d_k: int
    d_v: int
    f_in: int
    f_out: int
    h: int
    w: int
    kappa: float
    u: float
    w_q: np.ndarray = field(repr=False)  # (n_h, f_in, d_k/n_h)
    w_k: np.ndarray = field(repr=False)
    w_v: np.ndarray = field(repr=False)  # (n_h, f_in, d_v/n_h)
    w_o: np.ndarray = field(repr=False)  # (d_v, d_v)
    r_h: np.ndarray = field(repr=False)  # (n_h, 2h-1, d_k/n_h)
    r_w: np.ndarray = field(repr=False)  # (n_h, 2w-1, d_k/n_h)

    @property
    def d_kh(self):
        return self.d_k // self.n_h

    @property
    def d_vh(self):
        return self.d_v // self.n_h


def attention_depth(f_out, ratio, n_h):
    """Nearest multiple of n_h to ratio*f_out, at least n_h."""
    if ratio <= 0:
        raise ConfigError(f"attention ratio must be positive, got {ratio}")
    return max(n_h, n_h * int(math.floor(ratio * f_out / n_h + 0.5)))


def init_attention_params(rng, f_in, f_out, h, w, n_h=4, kappa=0.25, u=0.25,
                          dtype=np.float64):
    """Seeded parameter construction; draw order is fixed and documented:
    w_q, w_k, w_v, w_o, r_h, r_w."""
    if n_h < 1 or f_in < 1 or f_out < 1:
        raise ConfigError(f"bad attention sizes n_h={n_h} f_in={f_in} f_out={f_out}")
    d_k = attention_depth(f_out, kappa, n_h)
    d_v = attention_depth(f_out, u, n_h)
    d_kh, d_vh = d_k // n_h, d_v // n_h
    w_q = uniform_init(rng, (n_h, f_in, d_kh), f_in, dtype)
    w_k = uniform_init(rng, (n_h, f_in, d_kh), f_in, dtype)
    w_v = uniform_init(rng, (n_h, f_in, d_vh), f_in, dtype)
    w_o = uniform_init(rng, (d_v, d_v), d_v, dtype)
    sigma = d_kh ** -0.5
    r_h = (rng.standard_normal((n_h, 2 * h - 1, d_kh)) * sigma).astype(dtype)
    r_w = (rng.standard_normal((n_h, 2 * w - 1, d_kh)) * sigma).astype(dtype)
    return AttentionParams(n_h=n_h, d_k=d_k, d_v=d_v, f_in=f_in, f_out=f_out,
                           h=h, w=w, kappa=kappa, u=u,
                           w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o, r_h=r_h, r_w=r_w)


# ------------------------------------------------------- spatial flattening

def flatten_spatial(x):
    """(H,W,C) or (1,H,W,C) -> (HW, C), row-major (row index = h*W + w)."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ShapeError("flatten_spatial applies per batch item")
        x = x[0]
    if x.ndim != 3:
        raise ShapeError(f"expected (H,W,C), got shape {x.shape}")
    h, w, c = x.shape
    return np.ascontiguousarray(x.reshape(h * w, c))


def unflatten_spatial(m, h, w):
    if m.shape[0] != h * w:
        raise ShapeError(f"matrix has {m.shape[0]} rows, expected {h}x{w}={h * w}")
    return m.reshape(h, w, -1)


_IDX_CACHE = {}


def _rel_indices(h, w):
    """Per-pair embedding indices: idx_h[i,j] = (j_y - i_y) + h - 1, same for w."""
    key = (h, w)
    if key not in _IDX_CACHE:
        ys, xs = np.divmod(np.arange(h * w), w)
        idx_h = ((ys[None, :] - ys[:, None]) + h - 1).astype(np.int32)
        idx_w = ((xs[None, :] - xs[:, None]) + w - 1).astype(np.int32)
        _IDX_CACHE[key] = (idx_h, idx_w)
    return _IDX_CACHE[key]


# ----------------------------------------------------------- functional ops

def relative_logits(q, r_w, r_h, h, w):
    """Per-pair relative terms (S_rel_H, S_rel_W), each HW x HW, unscaled."""
    hw = h * w
    if q.shape[0] != hw:
        raise ShapeError(f"q has {q.shape[0]} rows, expected {hw}")
    if r_w.shape[0] != 2 * w - 1 or r_h.shape[0] != 2 * h - 1:
        raise ShapeError(
            f"embedding tables sized ({r_h.shape[0]},{r_w.shape[0]}), "
            f"need (2H-1,2W-1)=({2 * h - 1},{2 * w - 1})"
        )
    idx_h, idx_w = _rel_indices(h, w)
    rows = np.arange(hw)[:, None]
    s_h = (q @ r_h.T)[rows, idx_h]
    s_w = (q @ r_w.T)[rows, idx_w]
    return s_h, s_w


def _fsum_rows(m):
    return np.array([math.fsum(row) for row in m], dtype=m.dtype)


def _fsum_matmul(a, b):
    """a @ b with order-invariant (correctly rounded) row reductions."""
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = math.fsum(a[i, :] * b[:, j])
    return out


def attention_head(x, params, head_index, s_rel_h=None, s_rel_w=None):
    """One head of Softmax((QK^T + S_rel_H + S_rel_W)/sqrt(d_k_head)) V.

    x: HW x F_in matrix. The relative matrices may be precomputed and
    passed in; omitted, they are derived from this head's embeddings.
    """
    p = params
    q = x @ p.w_q[head_index]
    k = x @ p.w_k[head_index]
    v = x @ p.w_v[head_index]
    if s_rel_h is None or s_rel_w is None:
        s_rel_h, s_rel_w = relative_logits(q, p.r_w[head_index],
                                           p.r_h[head_index], p.h, p.w)
    content = _fsum_matmul(q, k.T)
    logits = (content + s_rel_h + s_rel_w) / np.sqrt(
        np.asarray(p.d_kh, dtype=x.dtype))
    if not np.isfinite(logits).all():
        raise ValueError("non-finite attention logits")
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    a = e / _fsum_rows(e)[:, None]
    return _fsum_matmul(a, v)


def multi_head_attention(x, params):
    """Concat of all head outputs along depth, mixed by W_O."""
    if x.ndim != 2 or x.shape[1] != params.f_in:
        raise ShapeError(
            f"expected HW x {params.f_in} matrix, got shape {x.shape}")
    outs = []
    for hd in range(params.n_h):
        q = x @ params.w_q[hd]
        s_h, s_w = relative_logits(q, params.r_w[hd], params.r_h[hd],
                                   params.h, params.w)
        outs.append(attention_head(x, params, hd, s_h, s_w))
    return np.concatenate(outs, axis=1) @ params.w_o


def attention_augmented_conv(x, conv_w, params):
    """concat[Conv(x), MHA(x)] along channels; conv fills F_out - d_v."""
    check_nhwc(x, "attention_augmented_conv input")
    kern = conv_w.kernel if hasattr(conv_w, "kernel") else conv_w
    _validate_depths(kern.shape[3], params)
    n, h, w, _ = x.shape
    if (h, w) != (params.h, params.w):
        raise ShapeError(
            f"input spatial {h}x{w} does not match embeddings {params.h}x{params.w}")
    conv_y = ops.conv2d(x, conv_w)
    att = np.empty((n, h, w, params.d_v), dtype=x.dtype)
    for b in range(n):
        att[b] = unflatten_spatial(
            multi_head_attention(flatten_spatial(x[b]), params), h, w)
    return ops.concat_channels([conv_y, att])


def _validate_depths(conv_channels, params):
    if params.d_v < 1:
        raise ConfigError("attention value depth d_v must be >= 1")
    if params.f_out - params.d_v < 1:
        raise ConfigError(
            f"no room for conv channels: F_out={params.f_out}, d_v={params.d_v}")
    if conv_channels + params.d_v != params.f_out:
        raise ConfigError(
            f"depth bookkeeping violated: conv {conv_channels} + d_v {params.d_v}"
            f" != F_out {params.f_out}")


# ------------------------------------------------------------ batched layer

def _mha_forward_fast(xm, p, keep):
    hw = xm.shape[0]
    idx_h, idx_w = _rel_indices(p.h, p.w)
    rows = np.arange(hw)[:, None]
    scale = 1.0 / math.sqrt(p.d_kh)
    outs = []
    head_caches = []
    for hd in range(p.n_h):
        q = xm @ p.w_q[hd]
        k = xm @ p.w_k[hd]
        v = xm @ p.w_v[hd]
        s_h = (q @ p.r_h[hd].T)[rows, idx_h]
        s_w = (q @ p.r_w[hd].T)[rows, idx_w]
        logits = (q @ k.T + s_h + s_w) * scale
        a = ops.softmax_rows(logits)
        outs.append(a @ v)
        if keep:
            head_caches.append((q, k, v, a))
    concat = np.concatenate(outs, axis=1)
    y = concat @ p.w_o
    return y, ((xm, head_caches, concat) if keep else None)


def _mha_backward_fast(dy, p, cache, g):
    xm, head_caches, concat = cache
    hw = xm.shape[0]
    idx_h, idx_w = _rel_indices(p.h, p.w)
    rows = np.arange(hw)[:, None]
    scale = 1.0 / math.sqrt(p.d_kh)
    g["w_o"] += concat.T @ dy
    dconcat = dy @ p.w_o.T
    dx = np.zeros_like(xm)
    d_vh = p.d_vh
    for hd in range(p.n_h):
        q, k, v, a = head_caches[hd]
        do = dconcat[:, hd * d_vh : (hd + 1) * d_vh]
        dv = a.T @ do
        da = do @ v.T
        dl = ops.softmax_rows_backward(da, a) * scale
        dq = dl @ k
        dk = dl.T @ q
        dqr_h = np.zeros((hw, 2 * p.h - 1), dtype=xm.dtype)
        np.add.at(dqr_h, (rows, idx_h), dl)
        dq += dqr_h @ p.r_h[hd]
        g["r_h"][hd] += dqr_h.T @ q
        dqr_w = np.zeros((hw, 2 * p.w - 1), dtype=xm.dtype)
        np.add.at(dqr_w, (rows, idx_w), dl)
        dq += dqr_w @ p.r_w[hd]
        g["r_w"][hd] += dqr_w.T @ q
        dx += dq @ p.w_q[hd].T + dk @ p.w_k[hd].T + dv @ p.w_v[hd].T
        g["w_q"][hd] += xm.T @ dq
        g["w_k"][hd] += xm.T @ dk
        g["w_v"][hd] += xm.T @ dv
    return dx


class AttentionAugmentedConv(Module):
    """Layer form of concat[Conv(x), MHA(x)] with trainable everything.

    Built for a fixed spatial extent (the embedding tables are sized for
    it). The conv branch kernel is drawn first, then the attention
    parameters, so seeds reproduce layer-for-layer.
    """

    def __init__(self, c_in, f_out, h, w, rng, dtype=np.float64, n_h=4,
                 kappa=0.25, u=0.25, conv_kernel=3, conv_bias=True):
        d_v = attention_depth(f_out, u, n_h)
        if f_out - d_v < 1:
            raise ConfigError(
                f"no room for conv channels: F_out={f_out} leaves {f_out - d_v}")
        self.h, self.w = h, w
        self.conv = Conv2D(c_in, f_out - d_v, conv_kernel, rng, dtype,
                           bias=conv_bias)
        self.att = init_attention_params(rng, c_in, f_out, h, w, n_h=n_h,
                                         kappa=kappa, u=u, dtype=dtype)
        _validate_depths(self.conv.c_out, self.att)
        self.g = {name: np.zeros_like(arr) for name, arr in self._att_arrays()}
        self._caches = None
        self._x_shape = None

    def _att_arrays(self):
        p = self.att
        return [("w_q", p.w_q), ("w_k", p.w_k), ("w_v", p.w_v),
                ("w_o", p.w_o), ("r_h", p.r_h), ("r_w", p.r_w)]

    def items(self):
        return [(name, arr, self.g[name]) for name, arr in self._att_arrays()]

    def children(self):
        return [("conv", self.conv)]

    def forward(self, x, train=False):
        check_nhwc(x, "AAC input")
        if x.shape[1] != self.h or x.shape[2] != self.w:
            raise ShapeError(
                f"AAC built for {self.h}x{self.w}, got {x.shape[1]}x{x.shape[2]}")
        self._x_shape = x.shape
        conv_y = self.conv.forward(x, train)
        n = x.shape[0]
        att = np.empty((n, self.h, self.w, self.att.d_v), dtype=x.dtype)
        self._caches = [] if train else None
        for b in range(n):
            xm = np.ascontiguousarray(x[b].reshape(self.h * self.w, -1))
            y, cache = _mha_forward_fast(xm, self.att, keep=train)
            att[b] = y.reshape(self.h, self.w, self.att.d_v)
            if train:
                self._caches.append(cache)
        return ops.concat_channels([conv_y, att])

    def backward(self, dy):
        if self._caches is None:
            raise RuntimeError("backward requires forward(train=True)")
        split = self.conv.c_out
        dx = self.conv.backward(np.ascontiguousarray(dy[..., :split]))
        n, h, w, _ = self._x_shape
        for b in range(n):
            dm = np.ascontiguousarray(dy[b, ..., split:].reshape(h * w, -1))
            dxm = _mha_backward_fast(dm, self.att, self._caches[b], self.g)
            dx[b] += dxm.reshape(h, w, -1)
        return dx
