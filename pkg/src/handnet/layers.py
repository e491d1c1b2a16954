"""Layer classes: parameter storage, forward caches, backward passes.

Every layer follows one protocol: forward(x, train) caches what backward
needs, backward(dy) accumulates parameter gradients in place and returns
the input gradient. Parameters are exposed as (name, param, grad) triples
so the optimizer and the weights file walk the same ordering.
"""

import numpy as np

from . import ops
from .tensor import ConfigError, ShapeError


def uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Composable unit with named parameters and child modules."""

    def items(self):
        """Own (name, param, grad) triples, stable order."""
        return []

    def buffers(self):
        """Own (name, array) non-trainable state (saved with weights)."""
        return []

    def children(self):
        return []

    def named_items(self, prefix=""):
        for name, p, g in self.items():
            yield prefix + name, p, g
        for cname, child in self.children():
            yield from child.named_items(prefix + cname + "/")

    def named_params(self, prefix=""):
        for name, p, _ in self.named_items(prefix):
            yield name, p

    def named_buffers(self, prefix=""):
        for name, b in self.buffers():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(prefix + cname + "/")

    def zero_grads(self):
        for _, _, g in self.named_items():
            g[...] = 0

    def param_count(self):
        return sum(p.size for _, p in self.named_params())

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Conv2D(Module):
    def __init__(self, c_in, c_out, k, rng, dtype=np.float64,
                 stride=1, padding="same", bias=True):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        self.w = uniform_init(rng, (k, k, c_in, c_out), k * k * c_in, dtype)
        self.gw = np.zeros_like(self.w)
        self.b = np.zeros(c_out, dtype=dtype) if bias else None
        self.gb = np.zeros_like(self.b) if bias else None
        self._x = None

    def items(self):
        out = [("w", self.w, self.gw)]
        if self.b is not None:
            out.append(("b", self.b, self.gb))
        return out

    def forward(self, x, train=False):
        self._x = x
        return ops.conv2d(x, self.w, stride=self.stride,
                          padding=self.padding, bias=self.b)

    def backward(self, dy):
        dx, dw, db = ops.conv2d_backward(dy, self._x, self.w, self.stride,
                                         self.padding, has_bias=self.b is not None)
        self.gw += dw
        if db is not None:
            self.gb += db
        return dx


class DepthwiseConv2D(Module):
    def __init__(self, c, k, rng, dtype=np.float64,
                 stride=1, padding="same", bias=True):
        self.c, self.k = c, k
        self.stride, self.padding = stride, padding
        self.w = uniform_init(rng, (k, k, c), k * k, dtype)
        self.gw = np.zeros_like(self.w)
        self.b = np.zeros(c, dtype=dtype) if bias else None
        self.gb = np.zeros_like(self.b) if bias else None
        self._x = None

    def items(self):
        out = [("w", self.w, self.gw)]
        if self.b is not None:
            out.append(("b", self.b, self.gb))
        return out

    def forward(self, x, train=False):
        self._x = x
        return ops.depthwise_conv(x, self.w, stride=self.stride,
                                  padding=self.padding, bias=self.b)

    def backward(self, dy):
        dx, dw, db = ops.depthwise_conv_backward(
            dy, self._x, self.w, self.stride, self.padding,
            has_bias=self.b is not None)
        self.gw += dw
        if db is not None:
            self.gb += db
        return dx


class BatchNorm(Module):
    def __init__(self, c, dtype=np.float64, eps=ops.BN_EPS, momentum=ops.BN_MOMENTUM):
        self.c = c
        self.eps, self.momentum = eps, momentum
        self.gamma = np.ones(c, dtype=dtype)
        self.beta = np.zeros(c, dtype=dtype)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self.running = {"mean": np.zeros(c, dtype=dtype),
                        "var": np.ones(c, dtype=dtype)}
        self._cache = None

    def items(self):
        return [("gamma", self.gamma, self.ggamma),
                ("beta", self.beta, self.gbeta)]

    def buffers(self):
        return [("running_mean", self.running["mean"]),
                ("running_var", self.running["var"])]

    def forward(self, x, train=False):
        y, self._cache = ops.batch_norm(
            x, self.gamma, self.beta, self.running,
            mode="train" if train else "infer",
            eps=self.eps, momentum=self.momentum)
        return y

    def backward(self, dy):
        dx, dgamma, dbeta = ops.batch_norm_backward(dy, self._cache)
        self.ggamma += dgamma
        self.gbeta += dbeta
        return dx


class Activation(Module):
    def __init__(self, kind):
        if kind not in ops.ACTIVATIONS:
            raise ConfigError(f"unknown activation {kind!r}")
        self.kind = kind
        self._fwd, self._bwd = ops.ACTIVATIONS[kind]
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return self._fwd(x)

    def backward(self, dy):
        return self._bwd(dy, self._x)


class AvgPool(Module):
    def __init__(self, k, stride, ceil_mode=False):
        self.k, self.stride, self.ceil_mode = k, stride, ceil_mode
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return ops.avg_pool(x, self.k, self.stride, self.ceil_mode)

    def backward(self, dy):
        return ops.avg_pool_backward(dy, self._shape, self.k,
                                     self.stride, self.ceil_mode)


class MaxPool(Module):
    def __init__(self, k, stride, ceil_mode=False):
        self.k, self.stride, self.ceil_mode = k, stride, ceil_mode
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return ops.max_pool(x, self.k, self.stride, self.ceil_mode)

    def backward(self, dy):
        return ops.max_pool_backward(dy, self._x, self.k,
                                     self.stride, self.ceil_mode)


class GlobalAvgPool(Module):
    """Mean over the full spatial extent, output 1x1 per channel."""

    def __init__(self):
        self._shape = None

    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeError(f"expected NHWC input, got shape {x.shape}")
        self._shape = x.shape
        return x.mean(axis=(1, 2), keepdims=True)

    def backward(self, dy):
        n, h, w, c = self._shape
        return np.broadcast_to(dy / (h * w), self._shape).astype(dy.dtype, copy=True)
