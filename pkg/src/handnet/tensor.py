"""Tensor conventions, validation, and binary serialization.

A "tensor" throughout this package is a contiguous numpy array in NHWC
order: (batch, height, width, channels). Precision is float32 or float64,
chosen at build time by passing the dtype down to constructors. There is
no wrapper class; plain ndarrays keep the kernels and tests direct.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MAGIC_TENSOR = b"AAPT"
MAGIC_WEIGHTS = b"AAPW"
FORMAT_VERSION = 1

# precision flag in file headers: bytes per element
_DTYPE_BY_FLAG = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_FLAG_BY_KIND = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


class ShapeError(ValueError):
    """Raised when an array's shape violates an operation's contract."""


class ConfigError(ValueError):
    """Raised for invalid configuration values or inconsistent settings."""


class FormatError(ValueError):
    """Raised for malformed or incompatible serialized files."""


def check_nhwc(x, name="tensor"):
    """Validate the NHWC contract: 4 dims, all >= 1, float dtype."""
    if not isinstance(x, np.ndarray):
        raise ShapeError(f"{name}: expected ndarray, got {type(x).__name__}")
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected 4 dims (N,H,W,C), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dims must be >= 1, got {x.shape}")
    if x.dtype not in (np.float32, np.float64):
        raise ShapeError(f"{name}: dtype must be float32/float64, got {x.dtype}")
    return x


@dataclass
class ConvWeights:
    """Convolution weights: kernel (kh, kw, C_in, C_out), optional bias (C_out,).

    Depthwise kernels use C_out = 1 and are interpreted per input channel.
    """

    kernel: np.ndarray
    bias: np.ndarray = None

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be 4D, got shape {self.kernel.shape}")
        if self.bias is not None and self.bias.ndim != 1:
            raise ShapeError(f"bias must be 1D, got shape {self.bias.shape}")


def dtype_flag(dtype):
    dt = np.dtype(dtype)
    if dt not in _FLAG_BY_KIND:
        raise FormatError(f"unsupported dtype {dt}, use float32 or float64")
    return _FLAG_BY_KIND[dt]


def save_tensor(path, x):
    """Write an NHWC tensor to the binary tensor format.

    Layout (little-endian): magic "AAPT", version u32, precision u32
    (bytes per element, 4 or 8), four dims as u64, then raw C-order data.
    """
    check_nhwc(x, "save_tensor input")
    flag = dtype_flag(x.dtype)
    with open(path, "wb") as f:
        f.write(MAGIC_TENSOR)
        f.write(struct.pack("<II", FORMAT_VERSION, flag))
        f.write(struct.pack("<4Q", *x.shape))
        f.write(np.ascontiguousarray(x, dtype=_DTYPE_BY_FLAG[flag]).tobytes())


def load_tensor(path):
    """Read a tensor written by save_tensor; round-trips bit-exactly."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC_TENSOR:
        raise FormatError(f"{path}: bad magic, not a tensor file")
    if len(data) < 4 + 8 + 32:
        raise FormatError(f"{path}: truncated header")
    version, flag = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if flag not in _DTYPE_BY_FLAG:
        raise FormatError(f"{path}: bad precision flag {flag}")
    dims = struct.unpack_from("<4Q", data, 12)
    if min(dims) < 1:
        raise FormatError(f"{path}: invalid dims {dims}")
    n = int(np.prod(dims))
    payload = data[44:]
    if len(payload) != n * flag:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {n * flag}"
        )
    dt = _DTYPE_BY_FLAG[flag]
    x = np.frombuffer(payload, dtype=dt).reshape(dims)
    return np.ascontiguousarray(x, dtype=dt.newbyteorder("="))


def config_hash(text):
    """sha256 digest (bytes) of a canonical config text."""
    return hashlib.sha256(text.encode("utf-8")).digest()
