"""Full network assembly, accounting, and weight persistence.

The default configuration stacks eight dense blocks with transitions
between them, halving the spatial extent seven times (224 -> 112 -> 56
-> 28 -> 14 -> 7 -> 4 -> 2), runs one final attention-augmented
bottleneck, pools to 1x1 and regresses 42 channels: 21 (x, y) pairs in
normalized [0, 1] image fractions, scaled to pixels at the interface.
Attention enters at dense block 3 and the conv 1x1 head carries the only
parameters past it.
"""

import struct
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import ops
from .attention import AttentionAugmentedConv, attention_depth
from .blocks import (AAInvertedBottleneck, BlockConfig, DenseBlock,
                     InvertedBottleneck, TransitionLayer)
from .blurpool import BlurPool
from .layers import (AvgPool, BatchNorm, Conv2D, DepthwiseConv2D,
                     GlobalAvgPool, MaxPool, Module)
from .metrics import NUM_KEYPOINTS, KeypointSet
from .tensor import (FORMAT_VERSION, MAGIC_WEIGHTS, ConfigError, FormatError,
                     ShapeError, config_hash, dtype_flag)

HEAD_CHANNELS = 2 * NUM_KEYPOINTS

_POOL_NAMES = ("blur", "average", "max")


@dataclass
class NetworkConfig:
    input_h: int = 224
    input_w: int = 224
    input_channels: int = 3
    blocks: tuple = (8, 8, 6, 8, 10, 12, 14, 32)
    transitions: tuple = (64, 64, 64, 64, 64, 128, 128)
    attention: bool = True
    attention_start: int = 3       # first dense block with attention, 1-based
    final_bottleneck: bool = True
    final_norm: bool = True        # batch norm before the global pool
    pooling: str = "blur"
    activation: str = "mish"
    growth: int = 10
    expansion: int = 4
    kappa: float = 0.25
    u: float = 0.25
    heads: int = 4
    width_mode: str = "growth"
    blur_n: int = 2
    aac_kernel: int = 3
    conv_bias: bool = True

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.transitions = tuple(int(t) for t in self.transitions)

    def validate(self):
        if len(self.transitions) != len(self.blocks) - 1:
            raise ConfigError(
                f"need len(blocks)-1 transitions, got {len(self.transitions)} "
                f"for {len(self.blocks)} blocks")
        if self.pooling not in _POOL_NAMES:
            raise ConfigError(f"pooling must be one of {_POOL_NAMES}")
        if self.activation not in ops.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.attention_start < 1:
            raise ConfigError("attention_start is a 1-based block index")
        if min(self.blocks) < 1 or (self.transitions and min(self.transitions) < 1):
            raise ConfigError("block sizes and transition widths must be >= 1")
        h, w = self.input_h, self.input_w
        for i in range(len(self.transitions)):
            if h < 2 or w < 2:
                # a stride-2 window no longer fits, pooling would fail
                raise ConfigError(f"spatial extent collapses at transition {i + 1}")
            h, w = -(-h // 2), -(-w // 2)
        return self

    def block_config(self, use_attention):
        return BlockConfig(e=self.expansion, k=self.growth,
                           activation=self.activation, attention=use_attention,
                           kappa=self.kappa, u=self.u, n_h=self.heads,
                           width_mode=self.width_mode,
                           aac_kernel=self.aac_kernel, bias=self.conv_bias)

    def canonical_text(self):
        lines = []
        for f in sorted(dc_fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse 'key = value' lines; omitted keys keep their defaults."""
        known = {f.name for f in dc_fields(cls)}
        defaults = cls()
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in known:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            current = getattr(defaults, key)
            try:
                if isinstance(current, bool):
                    if val not in ("on", "off"):
                        raise ValueError("expected on/off")
                    values[key] = val == "on"
                elif isinstance(current, tuple):
                    values[key] = tuple(int(x) for x in val.split(",") if x.strip())
                elif isinstance(current, int):
                    values[key] = int(val)
                elif isinstance(current, float):
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError as err:
                raise ConfigError(f"config line {lineno}: {key}: {err}") from None
        return cls(**values)


def default_config():
    return NetworkConfig()


def tiny_config():
    """Desk-scale preset for training and robustness experiments.

    Four stages so the head pools a 4x4 map; pooling any earlier starves
    the coordinate regression of position information.
    """
    return NetworkConfig(input_h=32, input_w=32, blocks=(2, 2, 2, 2),
                         transitions=(16, 16, 16), attention_start=3,
                         final_bottleneck=False)


def micro_config():
    """Two-stage truncation small enough for end-to-end gradient checks."""
    return NetworkConfig(input_h=16, input_w=16, blocks=(1, 1),
                         transitions=(16,), attention_start=2,
                         final_bottleneck=False)


# ablation grid: (attention, pooling, activation) per architecture index
ABLATIONS = {
    1: (True, "blur", "mish"),
    2: (False, "blur", "mish"),
    3: (False, "average", "mish"),
    4: (True, "average", "mish"),
    5: (True, "blur", "relu"),
    6: (False, "average", "relu"),
    7: (True, "average", "relu"),
    8: (False, "blur", "relu"),
    9: (False, "max", "mish"),
    10: (True, "max", "mish"),
    11: (False, "max", "relu"),
    12: (True, "max", "relu"),
}


def ablation_config(arch, base=None):
    if arch not in ABLATIONS:
        raise ConfigError(f"architecture index must be 1..12, got {arch}")
    cfg = base if base is not None else default_config()
    att, pool, act = ABLATIONS[arch]
    cfg.attention = att
    cfg.pooling = pool
    cfg.activation = act
    return cfg


PRESETS = {"default": default_config, "tiny": tiny_config, "micro": micro_config}


class Network(Module):
    def __init__(self, cfg, seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        self.stages = []
        self._stage_dims = []                # (h, w) at each stage's input
        c, h, w = cfg.input_channels, cfg.input_h, cfg.input_w
        trace = [h]
        for i, num_layers in enumerate(cfg.blocks, 1):
            use_att = cfg.attention and i >= cfg.attention_start
            block = DenseBlock(c, num_layers, cfg.block_config(use_att),
                               rng, dtype, h=h, w=w)
            self.stages.append((f"block{i}", block))
            self._stage_dims.append((h, w))
            c = block.c_out
            if i <= len(cfg.transitions):
                t = TransitionLayer(c, cfg.transitions[i - 1], cfg.pooling,
                                    rng, dtype, blur_n=cfg.blur_n)
                self.stages.append((f"transition{i}", t))
                self._stage_dims.append((h, w))
                c = t.c_out
                h, w = -(-h // 2), -(-w // 2)
                trace.append(h)
        if cfg.final_bottleneck:
            bcfg = cfg.block_config(cfg.attention)
            if cfg.attention:
                fb = AAInvertedBottleneck(c, h, w, bcfg, rng, dtype)
            else:
                fb = InvertedBottleneck(c, bcfg, rng, dtype)
            self.stages.append(("final_bottleneck", fb))
            self._stage_dims.append((h, w))
            c = cfg.growth
        if cfg.final_norm:
            # last stage output is a raw concat; normalize it so the
            # linear head sees well-conditioned features
            self.stages.append(("final_norm", BatchNorm(c, dtype=dtype)))
            self._stage_dims.append((h, w))
        self.pool = GlobalAvgPool()
        self.head = Conv2D(c, HEAD_CHANNELS, 1, rng, dtype, bias=True)
        self._head_in = c
        self._head_dims = (h, w)
        trace.append(1)
        self._trace = trace

    def children(self):
        return list(self.stages) + [("head", self.head)]

    def spatial_trace(self):
        """Heights after the input and each downsampling step."""
        return list(self._trace)

    def forward_raw(self, x, train=False):
        if x.shape[1] != self.cfg.input_h or x.shape[2] != self.cfg.input_w:
            raise ShapeError(
                f"expected {self.cfg.input_h}x{self.cfg.input_w} input, "
                f"got {x.shape[1]}x{x.shape[2]}")
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        for _, stage in self.stages:
            x = stage.forward(x, train)
        x = self.pool.forward(x, train)
        return self.head.forward(x, train)

    def backward(self, dy):
        d = self.pool.backward(self.head.backward(dy))
        for _, stage in reversed(self.stages):
            d = stage.backward(d)
        return d

    def predict(self, x, train=False):
        """(N,21,2) keypoints in pixels; x and y scale with width/height."""
        raw = self.forward_raw(x, train)
        coords = raw.reshape(raw.shape[0], NUM_KEYPOINTS, 2).astype(np.float64)
        scale = np.array([self.cfg.input_w, self.cfg.input_h], dtype=np.float64)
        return coords * scale

    def forward(self, x, train=False):
        """KeypointSet per batch item."""
        return [KeypointSet(p) for p in self.predict(x, train)]


# ------------------------------------------------------------- accounting

def count_params(net, itemized=False):
    """Exact trainable scalar count; buffers (running stats) excluded."""
    items = [(name, int(p.size)) for name, p in net.named_params()]
    total = sum(n for _, n in items)
    return (total, items) if itemized else total


@dataclass
class FlopReport:
    items: list                   # (name, macs)
    total_macs: int
    total_flops: int
    reduction_factors: list       # (name, k_f, d_o, factor_kf, factor_k)


def _conv_macs(h, w, k, c_in, c_out, stride=1):
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    return ho * wo * k * k * c_in * c_out


def _aac_macs(h, w, p):
    hw = h * w
    proj = hw * p.f_in * (2 * p.d_k + p.d_v)
    logits = hw * hw * p.d_k
    rel = p.n_h * hw * (2 * p.h - 1 + 2 * p.w - 1) * p.d_kh
    attend = hw * hw * p.d_v
    mix = hw * p.d_v * p.d_v
    return proj + logits + rel + attend + mix


def count_flops(net, batch=1):
    """Per-layer multiply-accumulates for one forward pass (2 FLOPs per
    MAC, biases and elementwise work excluded). Blur pooling counts as the
    depthwise convolution it is. Also reports the separable-conv reduction
    factor of every depthwise-separable site under both denominator
    readings (kernel size squared, and growth rate squared)."""
    items = []
    factors = []
    growth = net.cfg.growth

    def bottleneck(name, m, h, w):
        width = m.expand.c_out
        items.append((f"{name}/expand", _conv_macs(h, w, 1, m.expand.c_in, width)))
        if isinstance(m, AAInvertedBottleneck):
            items.append((f"{name}/sep_dw", _conv_macs(h, w, 3, width, 1)))
            items.append((f"{name}/sep_pw", _conv_macs(h, w, 1, width, width)))
            kf = m.aac.conv.k
            items.append((f"{name}/aac/conv",
                          _conv_macs(h, w, kf, width, m.aac.conv.c_out)))
            items.append((f"{name}/aac/attention", _aac_macs(h, w, m.aac.att)))
            factors.append((f"{name}/sep", 3, width,
                            ops.separable_reduction_factor(3, width),
                            ops.separable_reduction_factor(3, width, growth)))
        else:
            items.append((f"{name}/dw", _conv_macs(h, w, 3, width, 1)))
        items.append((f"{name}/squeeze", _conv_macs(h, w, 1, width, m.squeeze.c_out)))

    for (name, stage), (h, w) in zip(net.stages, net._stage_dims):
        if isinstance(stage, BatchNorm):
            continue                      # elementwise, no MACs
        if isinstance(stage, DenseBlock):
            for i, layer in enumerate(stage.layers):
                bottleneck(f"{name}/layer{i}", layer, h, w)
        elif isinstance(stage, TransitionLayer):
            items.append((f"{name}/conv",
                          _conv_macs(h, w, 1, stage.conv.c_in, stage.conv.c_out)))
            if isinstance(stage.pool, BlurPool):
                m = stage.pool.filter.m
                ho, wo = -(-h // 2), -(-w // 2)
                items.append((f"{name}/blurpool",
                              ho * wo * m * m * stage.conv.c_out))
        else:
            bottleneck(name, stage, h, w)
    hh, hw_ = net._head_dims
    items.append(("head/conv", _conv_macs(1, 1, 1, net._head_in, HEAD_CHANNELS)))
    total = batch * sum(m for _, m in items)
    items = [(n, batch * m) for n, m in items]
    return FlopReport(items=items, total_macs=total, total_flops=2 * total,
                      reduction_factors=factors)


# ------------------------------------------------------------ persistence

def _named_state(net):
    return list(net.named_params()) + list(net.named_buffers())


def save_weights(net, path):
    """Binary weights file: magic, version, precision, embedded config
    text plus its sha256, then named tensor records. Little-endian."""
    cfg_text = net.cfg.canonical_text().encode("utf-8")
    flag = dtype_flag(net.dtype)
    state = _named_state(net)
    with open(path, "wb") as f:
        f.write(MAGIC_WEIGHTS)
        f.write(struct.pack("<II", FORMAT_VERSION, flag))
        f.write(struct.pack("<I", len(cfg_text)))
        f.write(cfg_text)
        f.write(config_hash(cfg_text.decode("utf-8")))
        f.write(struct.pack("<I", len(state)))
        for name, arr in state:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype(
                f"<f{flag}", copy=False).tobytes())


def load_weights(path, expected_config=None):
    """Rebuild a network from a weights file.

    The embedded config's hash must match the stored hash, and when an
    expected config is supplied its canonical text must match as well.
    """
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"{path}: truncated while reading {what}")
        out = data[off : off + n]
        off += n
        return out

    if take(4, "magic") != MAGIC_WEIGHTS:
        raise FormatError(f"{path}: bad magic, not a weights file")
    version, flag = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if flag not in (4, 8):
        raise FormatError(f"{path}: bad precision flag {flag}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        cfg_text = take(cfg_len, "config").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: config block is not valid text") from exc
    stored_hash = take(32, "config hash")
    if config_hash(cfg_text) != stored_hash:
        raise FormatError(f"{path}: config hash mismatch, file corrupt")
    if expected_config is not None \
            and expected_config.canonical_text() != cfg_text:
        raise FormatError(
            f"{path}: weights belong to a different configuration")
    cfg = NetworkConfig.from_text(cfg_text)
    dtype = np.float32 if flag == 4 else np.float64
    net = Network(cfg, seed=0, dtype=dtype)
    state = dict(_named_state(net))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    if count != len(state):
        raise FormatError(
            f"{path}: file has {count} tensors, network needs {len(state)}")
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name not in state:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        target = state.pop(name)
        if dims != target.shape:
            raise FormatError(
                f"{path}: {name} has shape {dims}, expected {target.shape}")
        raw = take(int(np.prod(dims)) * flag, f"data for {name}")
        target[...] = np.frombuffer(raw, dtype=f"<f{flag}").reshape(dims)
    if state:
        raise FormatError(f"{path}: missing tensors: {sorted(state)[:3]}")
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return net
