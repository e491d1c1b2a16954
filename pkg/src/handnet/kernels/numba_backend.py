"""Compiled convolution kernels.

Same surface as numpy_backend, explicit loops under @njit. Single-threaded
on purpose: sequential accumulation keeps results bit-deterministic across
runs, and the disk cache makes recompiles cheap. No fastmath.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d(xp, w, stride):
    n, hp, wp, ci = xp.shape
    kh, kw, _, co = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    y = np.zeros((n, ho, wo, co), dtype=xp.dtype)
    for b in range(n):
        for oh in range(ho):
            hi = oh * stride
            for ow in range(wo):
                wi = ow * stride
                for i in range(kh):
                    for j in range(kw):
                        for c in range(ci):
                            v = xp[b, hi + i, wi + j, c]
                            for o in range(co):
                                y[b, oh, ow, o] += v * w[i, j, c, o]
    return y


@njit(cache=True)
def conv2d_dx(dy, w, stride, hp, wp):
    n, ho, wo, co = dy.shape
    kh, kw, ci, _ = w.shape
    dxp = np.zeros((n, hp, wp, ci), dtype=dy.dtype)
    for b in range(n):
        for oh in range(ho):
            hi = oh * stride
            for ow in range(wo):
                wi = ow * stride
                for i in range(kh):
                    for j in range(kw):
                        for c in range(ci):
                            acc = dxp[b, hi + i, wi + j, c]
                            for o in range(co):
                                acc += dy[b, oh, ow, o] * w[i, j, c, o]
                            dxp[b, hi + i, wi + j, c] = acc
    return dxp


@njit(cache=True)
def conv2d_dw(xp, dy, stride, kh, kw):
    n, ho, wo, co = dy.shape
    ci = xp.shape[3]
    dw = np.zeros((kh, kw, ci, co), dtype=dy.dtype)
    for b in range(n):
        for oh in range(ho):
            hi = oh * stride
            for ow in range(wo):
                wi = ow * stride
                for i in range(kh):
                    for j in range(kw):
                        for c in range(ci):
                            v = xp[b, hi + i, wi + j, c]
                            for o in range(co):
                                dw[i, j, c, o] += v * dy[b, oh, ow, o]
    return dw


@njit(cache=True)
def depthwise(xp, w, stride):
    n, hp, wp, c = xp.shape
    kh, kw, _ = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    y = np.zeros((n, ho, wo, c), dtype=xp.dtype)
    for b in range(n):
        for oh in range(ho):
            hi = oh * stride
            for ow in range(wo):
                wi = ow * stride
                for i in range(kh):
                    for j in range(kw):
                        for ch in range(c):
                            y[b, oh, ow, ch] += xp[b, hi + i, wi + j, ch] * w[i, j, ch]
    return y


@njit(cache=True)
def depthwise_dx(dy, w, stride, hp, wp):
    n, ho, wo, c = dy.shape
    kh, kw, _ = w.shape
    dxp = np.zeros((n, hp, wp, c), dtype=dy.dtype)
    for b in range(n):
        for oh in range(ho):
            hi = oh * stride
            for ow in range(wo):
                wi = ow * stride
                for i in range(kh):
                    for j in range(kw):
                        for ch in range(c):
                            dxp[b, hi + i, wi + j, ch] += dy[b, oh, ow, ch] * w[i, j, ch]
    return dxp


@njit(cache=True)
def depthwise_dw(xp, dy, stride, kh, kw):
    n, ho, wo, c = dy.shape
    dw = np.zeros((kh, kw, c), dtype=dy.dtype)
    for b in range(n):
        for oh in range(ho):
            hi = oh * stride
            for ow in range(wo):
                wi = ow * stride
                for i in range(kh):
                    for j in range(kw):
                        for ch in range(c):
                            dw[i, j, ch] += xp[b, hi + i, wi + j, ch] * dy[b, oh, ow, ch]
    return dw
