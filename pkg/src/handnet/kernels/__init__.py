"""Backend selection for the convolution kernels.

Two interchangeable implementations: "numba" (compiled loops, default when
importable) and "numpy" (strided-slice matmuls). Pick one with the
HANDNET_BACKEND environment variable or set_backend(); both expose
conv2d / conv2d_dx / conv2d_dw / depthwise / depthwise_dx / depthwise_dw
over pre-padded NHWC arrays. Results agree to float round-off; within a
backend they are bit-reproducible run to run.
"""

import os

from ..tensor import ConfigError
from . import numpy_backend

_BACKENDS = {"numpy": numpy_backend}
try:
    from . import numba_backend

    _BACKENDS["numba"] = numba_backend
except ImportError:  # numba not installed; numpy path still works
    numba_backend = None

_default = "numba" if "numba" in _BACKENDS else "numpy"
_requested = os.environ.get("HANDNET_BACKEND", _default)
_active = None  # validated on first use so a bad env var cannot break import


def _resolve():
    global _active
    if _active is None:
        if _requested not in _BACKENDS:
            raise ConfigError(
                f"HANDNET_BACKEND={_requested!r} unknown, choose from {sorted(_BACKENDS)}"
            )
        _active = _requested
    return _active


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ConfigError(f"unknown backend {name!r}, choose from {sorted(_BACKENDS)}")
    _active = name


def active_backend():
    return _resolve()


def available_backends():
    return sorted(_BACKENDS)


def get():
    """The module implementing the active backend."""
    return _BACKENDS[_resolve()]
