"""Vectorized numpy convolution kernels.

All functions take pre-padded inputs and compute valid-mode convolutions
by summing one strided slice per kernel tap. Used as the fallback when
the compiled backend is disabled, and as a cross-check in tests.
"""

import numpy as np


def _tap(xp, i, j, ho, wo, stride):
    return xp[:, i : i + (ho - 1) * stride + 1 : stride,
              j : j + (wo - 1) * stride + 1 : stride, :]


def conv2d(xp, w, stride):
    """xp (N,Hp,Wp,Ci), w (kh,kw,Ci,Co) -> (N,Ho,Wo,Co), valid windows."""
    n, hp, wp, _ = xp.shape
    kh, kw, _, co = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    y = np.zeros((n, ho, wo, co), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            y += _tap(xp, i, j, ho, wo, stride) @ w[i, j]
    return y


def conv2d_dx(dy, w, stride, hp, wp):
    """Gradient wrt the padded input."""
    n, ho, wo, _ = dy.shape
    kh, kw, ci, _ = w.shape
    dxp = np.zeros((n, hp, wp, ci), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            _tap(dxp, i, j, ho, wo, stride)[...] += dy @ w[i, j].T
    return dxp


def conv2d_dw(xp, dy, stride, kh, kw):
    n, ho, wo, co = dy.shape
    ci = xp.shape[3]
    dw = np.zeros((kh, kw, ci, co), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = _tap(xp, i, j, ho, wo, stride)
            dw[i, j] = np.tensordot(xs, dy, axes=([0, 1, 2], [0, 1, 2]))
    return dw


def depthwise(xp, w, stride):
    """xp (N,Hp,Wp,C), w (kh,kw,C) -> (N,Ho,Wo,C), one filter per channel."""
    n, hp, wp, c = xp.shape
    kh, kw, _ = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    y = np.zeros((n, ho, wo, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            y += _tap(xp, i, j, ho, wo, stride) * w[i, j]
    return y


def depthwise_dx(dy, w, stride, hp, wp):
    n, ho, wo, c = dy.shape
    kh, kw, _ = w.shape
    dxp = np.zeros((n, hp, wp, c), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            _tap(dxp, i, j, ho, wo, stride)[...] += dy * w[i, j]
    return dxp


def depthwise_dw(xp, dy, stride, kh, kw):
    n, ho, wo, c = dy.shape
    dw = np.zeros((kh, kw, c), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = _tap(xp, i, j, ho, wo, stride)
            dw[i, j] = (xs * dy).sum(axis=(0, 1, 2))
    return dw
