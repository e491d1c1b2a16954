"""Composite blocks: inverted bottlenecks, dense blocks, transitions.

The attention-augmented bottleneck wires the expanded tensor through a
depthwise-separable branch and an attention-augmented convolution branch
in parallel, adds them elementwise, then squeezes:

    in -> 1x1 expand -> act -> { dw3x3 + pw1x1 } + { AAC } -> act -> 1x1 to k

Activations sit after the expansion and after the addition; none after
the squeeze. Blocks contain no batch norm; normalization lives in the
transition layers (1x1 conv -> stride-2 pool -> batch norm).
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import AttentionAugmentedConv
from .blurpool import BlurPool
from .layers import (Activation, AvgPool, BatchNorm, Conv2D, DepthwiseConv2D,
                     MaxPool, Module)
from .tensor import ConfigError


@dataclass
class BlockConfig:
    e: int = 4                 # expansion factor
    k: int = 10                # growth rate (squeeze target)
    activation: str = "mish"
    attention: bool = False
    kappa: float = 0.25
    u: float = 0.25
    n_h: int = 4
    width_mode: str = "growth"  # expanded width: "growth" = e*k, "input" = e*C_in
    aac_kernel: int = 3
    bias: bool = True

    def __post_init__(self):
        if self.e < 1 or self.k < 1:
            raise ConfigError(f"e and k must be >= 1, got e={self.e} k={self.k}")
        if self.activation not in ops.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.width_mode not in ("growth", "input"):
            raise ConfigError(f"width_mode must be growth|input, got {self.width_mode!r}")
        if self.attention and (self.kappa <= 0 or self.u <= 0 or self.n_h < 1):
            raise ConfigError("attention=on requires positive kappa, u and n_h >= 1")

    def width(self, c_in):
        return self.e * (self.k if self.width_mode == "growth" else c_in)


class InvertedBottleneck(Module):
    """1x1 expand -> act -> 3x3 depthwise -> act -> 1x1 squeeze to k."""

    def __init__(self, c_in, cfg, rng, dtype=np.float64):
        width = cfg.width(c_in)
        self.c_in, self.c_out = c_in, cfg.k
        self.expand = Conv2D(c_in, width, 1, rng, dtype, bias=cfg.bias)
        self.act1 = Activation(cfg.activation)
        self.dw = DepthwiseConv2D(width, 3, rng, dtype, bias=cfg.bias)
        self.act2 = Activation(cfg.activation)
        self.squeeze = Conv2D(width, cfg.k, 1, rng, dtype, bias=cfg.bias)

    def children(self):
        return [("expand", self.expand), ("dw", self.dw),
                ("squeeze", self.squeeze)]

    def forward(self, x, train=False):
        y = self.act1.forward(self.expand.forward(x, train), train)
        y = self.act2.forward(self.dw.forward(y, train), train)
        return self.squeeze.forward(y, train)

    def backward(self, dy):
        d = self.act2.backward(self.squeeze.backward(dy))
        d = self.act1.backward(self.dw.backward(d))
        return self.expand.backward(d)


class AAInvertedBottleneck(Module):
    """Inverted bottleneck with a parallel attention-augmented branch.

    Built for a fixed spatial extent; both parallel branches map the
    expanded width back to itself so the addition is well-formed.
    Weight draw order: expand, separable dw, separable pw, AAC, squeeze.
    """

    def __init__(self, c_in, h, w, cfg, rng, dtype=np.float64):
        if not cfg.attention:
            raise ConfigError("AAInvertedBottleneck requires attention=on")
        width = cfg.width(c_in)
        self.c_in, self.c_out = c_in, cfg.k
        self.expand = Conv2D(c_in, width, 1, rng, dtype, bias=cfg.bias)
        self.act1 = Activation(cfg.activation)
        self.sep_dw = DepthwiseConv2D(width, 3, rng, dtype, bias=cfg.bias)
        self.sep_pw = Conv2D(width, width, 1, rng, dtype, bias=cfg.bias)
        self.aac = AttentionAugmentedConv(width, width, h, w, rng, dtype,
                                          n_h=cfg.n_h, kappa=cfg.kappa, u=cfg.u,
                                          conv_kernel=cfg.aac_kernel,
                                          conv_bias=cfg.bias)
        self.act2 = Activation(cfg.activation)
        self.squeeze = Conv2D(width, cfg.k, 1, rng, dtype, bias=cfg.bias)

    def children(self):
        return [("expand", self.expand), ("sep_dw", self.sep_dw),
                ("sep_pw", self.sep_pw), ("aac", self.aac),
                ("squeeze", self.squeeze)]

    def forward(self, x, train=False):
        e = self.act1.forward(self.expand.forward(x, train), train)
        sep = self.sep_pw.forward(self.sep_dw.forward(e, train), train)
        att = self.aac.forward(e, train)
        y = self.act2.forward(sep + att, train)
        return self.squeeze.forward(y, train)

    def backward(self, dy):
        dm = self.act2.backward(self.squeeze.backward(dy))
        de = self.sep_dw.backward(self.sep_pw.backward(dm))
        de += self.aac.backward(dm)
        d = self.act1.backward(de)
        return self.expand.backward(d)


class DenseBlock(Module):
    """Layer i consumes the concat of the block input and all previous
    k-channel outputs; the block emits the full concatenation."""

    def __init__(self, c_in, num_layers, cfg, rng, dtype=np.float64,
                 h=None, w=None):
        if num_layers < 1:
            raise ConfigError(f"dense block needs >= 1 layers, got {num_layers}")
        if cfg.attention and (h is None or w is None):
            raise ConfigError("attention dense block needs its spatial extent")
        self.c_in = c_in
        self.k = cfg.k
        self.layers = []
        c = c_in
        for _ in range(num_layers):
            if cfg.attention:
                self.layers.append(AAInvertedBottleneck(c, h, w, cfg, rng, dtype))
            else:
                self.layers.append(InvertedBottleneck(c, cfg, rng, dtype))
            c += cfg.k
        self.c_out = c
        self._sizes = None

    def children(self):
        return [(f"layer{i}", l) for i, l in enumerate(self.layers)]

    def forward(self, x, train=False):
        feats = [x]
        for layer in self.layers:
            xin = feats[0] if len(feats) == 1 else ops.concat_channels(feats)
            feats.append(layer.forward(xin, train))
        self._sizes = [f.shape[3] for f in feats]
        return ops.concat_channels(feats)

    def backward(self, dy):
        dfeats = [np.ascontiguousarray(d)
                  for d in ops.split_channels(dy, self._sizes)]
        for i in range(len(self.layers) - 1, -1, -1):
            dxin = self.layers[i].backward(dfeats[i + 1])
            if i == 0:
                dfeats[0] += dxin
            else:
                for j, part in enumerate(ops.split_channels(dxin, self._sizes[: i + 1])):
                    dfeats[j] += part
        return dfeats[0]


_POOLS = {
    "blur": lambda blur_n: BlurPool(n=blur_n, stride=2),
    "average": lambda blur_n: AvgPool(2, 2, ceil_mode=True),
    "avg": lambda blur_n: AvgPool(2, 2, ceil_mode=True),
    "max": lambda blur_n: MaxPool(2, 2, ceil_mode=True),
}


class TransitionLayer(Module):
    """1x1 conv to out_channels -> stride-2 pooling -> batch norm.

    The conv carries no bias (the batch norm absorbs it). Spatial dims
    go to ceil(extent/2) for every pooling variant, so odd extents (7)
    land on the same chain (4) regardless of the ablation choice.
    """

    def __init__(self, c_in, c_out, pooling, rng, dtype=np.float64, blur_n=2):
        if pooling not in _POOLS:
            raise ConfigError(f"pooling must be blur|average|max, got {pooling!r}")
        self.c_in, self.c_out = c_in, c_out
        self.conv = Conv2D(c_in, c_out, 1, rng, dtype, bias=False)
        self.pool = _POOLS[pooling](blur_n)
        self.bn = BatchNorm(c_out, dtype)

    def children(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def forward(self, x, train=False):
        return self.bn.forward(
            self.pool.forward(self.conv.forward(x, train), train), train)

    def backward(self, dy):
        return self.conv.backward(self.pool.backward(self.bn.backward(dy)))
