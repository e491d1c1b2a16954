"""Anti-aliased downsampling and shift-equivariance measurement.

The blur kernel is built by self-convolving a length-n box into a
length-(2n-1) triangle, taking its outer product, and normalizing to
unit sum so constant inputs pass through unchanged. Inputs are reflect
padded before the strided depthwise convolution; zero padding would
inject boundary alias into the equivariance measurements.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels, ops
from .layers import Module
from .ops import max_pool  # ablation baseline, same home as the filter
from .tensor import ShapeError, check_nhwc


@dataclass(frozen=True)
class BlurFilter:
    n: int
    m: int
    box: np.ndarray = field(repr=False)      # triangle, unnormalized
    kernel: np.ndarray = field(repr=False)   # m x m, unit sum


def make_box(n):
    """Length-n box of ones."""
    if n < 1:
        raise ShapeError(f"box length must be >= 1, got {n}")
    return np.ones(n, dtype=np.float64)


def make_blur_filter(n):
    """Self-convolve the box, outer-product it, normalize to unit sum."""
    box = make_box(n)
    tri = np.convolve(box, box)
    kern = np.outer(tri, tri)
    kern /= kern.sum()
    return BlurFilter(n=n, m=2 * n - 1, box=tri, kernel=kern)


def blur_pool(x, f, stride=2):
    """Depthwise convolution of every channel with f.kernel, strided.

    Reflect padding keeps output extent at ceil(len/stride). A length-1
    axis cannot reflect and is replicated instead.
    """
    check_nhwc(x, "blur_pool input")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    pad = (f.m - 1) // 2
    xp = ops.reflect_pad(x, pad, pad)
    kern = np.ascontiguousarray(
        np.broadcast_to(f.kernel[:, :, None].astype(x.dtype), (f.m, f.m, x.shape[3]))
    )
    y = kernels.get().depthwise(xp, kern, stride)
    if y.shape[1] < 1 or y.shape[2] < 1:
        raise ShapeError(f"blur_pool output collapsed below 1x1 for input {x.shape}")
    return y


def blur_pool_backward(dy, x_shape, f, stride=2):
    pad = (f.m - 1) // 2
    n, h, w, c = x_shape
    kern = np.ascontiguousarray(
        np.broadcast_to(f.kernel[:, :, None].astype(dy.dtype), (f.m, f.m, c))
    )
    dxp = kernels.get().depthwise_dx(dy, kern, stride, h + 2 * pad, w + 2 * pad)
    return ops.reflect_pad_backward(dxp, h, w, pad, pad)


class BlurPool(Module):
    """Parameter-free layer wrapper around blur_pool."""

    def __init__(self, n=2, stride=2):
        self.filter = make_blur_filter(n)
        self.stride = stride
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return blur_pool(x, self.filter, self.stride)

    def backward(self, dy):
        return blur_pool_backward(dy, self._shape, self.filter, self.stride)


class PoolExtractor:
    """Single-layer feature extractor for shift studies.

    Optionally colors the input with a fixed random 3x3 depthwise conv
    (identical across pooling variants when built from the same seed),
    then downsamples with the chosen pooling. Exposes total_stride and
    receptive_radius for interior cropping.
    """

    def __init__(self, pooling, channels, rng=None, with_conv=False,
                 n=2, k=2, stride=2, dtype=np.float64):
        if pooling not in ("blur", "avg", "max"):
            raise ShapeError(f"unknown pooling {pooling!r}")
        self.pooling = pooling
        self.stride = stride
        self.n, self.k = n, k
        self.conv_w = None
        if with_conv:
            if rng is None:
                raise ShapeError("with_conv requires an rng")
            self.conv_w = rng.standard_normal((3, 3, channels)).astype(dtype)
        self.filter = make_blur_filter(n) if pooling == "blur" else None
        pool_radius = (self.filter.m - 1) // 2 if pooling == "blur" else k - 1
        self.receptive_radius = pool_radius + (1 if with_conv else 0)
        self.total_stride = stride

    def forward(self, x, train=False):
        if self.conv_w is not None:
            x = ops.depthwise_conv(x, self.conv_w)
        if self.pooling == "blur":
            return blur_pool(x, self.filter, self.stride)
        if self.pooling == "avg":
            return ops.avg_pool(x, self.k, self.stride, ceil_mode=True)
        return ops.max_pool(x, self.k, self.stride, ceil_mode=True)


def shift_equivariance_deviation(model, x, dh, dw):
    """Normalized L2 gap between shift-then-extract and extract-then-shift.

    When the shift is a multiple of the model's total stride the extracted
    map is shifted by shift/stride for comparison (equivariance). Otherwise
    the unshifted map is compared directly, measuring how far the output
    moves at all (invariance residual). Both are evaluated on the interior
    region a margin away from boundary effects; shifts use circular roll
    and the contaminated rim is cropped off.
    """
    check_nhwc(x, "shift input")
    fwd = model.forward if hasattr(model, "forward") else model
    s = getattr(model, "total_stride", 1)
    radius = getattr(model, "receptive_radius", 0)
    y_ref = fwd(x)
    x_sh = np.roll(x, (dh, dw), axis=(1, 2))
    y_sh = fwd(x_sh)
    if dh % s == 0 and dw % s == 0:
        y_cmp = np.roll(y_ref, (dh // s, dw // s), axis=(1, 2))
    else:
        y_cmp = y_ref
    margin = -((radius + max(abs(dh), abs(dw))) // -s) + 1
    h, w = y_sh.shape[1], y_sh.shape[2]
    if 2 * margin >= h or 2 * margin >= w:
        raise ShapeError(
            f"shift ({dh},{dw}) leaves no interior: margin {margin} on {h}x{w} output"
        )
    a = y_sh[:, margin : h - margin, margin : w - margin, :]
    b = y_cmp[:, margin : h - margin, margin : w - margin, :]
    num = float(np.linalg.norm((a - b).ravel()))
    den = float(np.linalg.norm(a.ravel()) + np.linalg.norm(b.ravel())) + 1e-12
    return num / den
