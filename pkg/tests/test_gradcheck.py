import numpy as np
import pytest

from handnet.gradcheck import grad_check
from handnet.layers import (AvgPool, BatchNorm, Conv2D, DepthwiseConv2D,
                            GlobalAvgPool, MaxPool, Module)


class Affine(Module):
    """y = x*w + b elementwise; minimal module for harness tests."""

    def __init__(self, shape, rng):
        self.w = rng.standard_normal(shape)
        self.b = rng.standard_normal(shape)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def items(self):
        return [("w", self.w, self.gw), ("b", self.b, self.gb)]

    def forward(self, x, train=False):
        self._x = x
        return x * self.w + self.b

    def backward(self, dy):
        self.gw += (dy * self._x).sum(axis=0)
        self.gb += dy.sum(axis=0)
        return dy * self.w


class BrokenAffine(Affine):
    # deliberately wrong dw: missing the input factor
    def backward(self, dy):
        self.gw += dy.sum(axis=0)
        self.gb += dy.sum(axis=0)
        return dy * self.w


class NaNAffine(Affine):
    def backward(self, dy):
        self.gw += np.nan
        self.gb += dy.sum(axis=0)
        return dy * self.w


def test_correct_module_passes():
    rng = np.random.default_rng(0)
    m = Affine((3, 4), rng)
    rep = grad_check(m, None, rng.standard_normal((2, 3, 4)))
    assert rep.passed
    assert rep.max_relative_error < 1e-7
    assert rep.checked == 2 * 12 + 24  # params twice + input


def test_broken_backward_detected():
    rng = np.random.default_rng(1)
    m = BrokenAffine((3, 4), rng)
    rep = grad_check(m, None, rng.standard_normal((2, 3, 4)))
    assert not rep.passed
    assert rep.worst_parameter == "w"


def test_nan_gradient_raises():
    rng = np.random.default_rng(2)
    m = NaNAffine((2, 2), rng)
    with pytest.raises(ValueError, match="non-finite"):
        grad_check(m, None, rng.standard_normal((1, 2, 2)))


def test_float32_input_rejected():
    rng = np.random.default_rng(3)
    m = Affine((2, 2), rng)
    with pytest.raises(ValueError, match="float64"):
        grad_check(m, None, rng.standard_normal((1, 2, 2)).astype(np.float32))


def test_report_str_mentions_outcome():
    rng = np.random.default_rng(4)
    rep = grad_check(Affine((2, 3), rng), None, rng.standard_normal((1, 2, 3)))
    assert "pass" in str(rep)


def test_input_gradient_optional():
    rng = np.random.default_rng(5)
    m = Affine((2, 2), rng)
    rep = grad_check(m, None, rng.standard_normal((1, 2, 2)),
                     include_input=False)
    assert rep.checked == 8


@pytest.mark.parametrize("layer_fn,shape", [
    (lambda r: Conv2D(2, 3, 3, r), (2, 5, 5, 2)),
    (lambda r: Conv2D(3, 2, 1, r, bias=False), (1, 4, 4, 3)),
    (lambda r: Conv2D(2, 2, 2, r, stride=2), (1, 6, 6, 2)),
    (lambda r: DepthwiseConv2D(3, 3, r), (2, 5, 5, 3)),
    (lambda r: BatchNorm(4), (3, 3, 3, 4)),
    (lambda r: AvgPool(2, 2, ceil_mode=True), (1, 5, 5, 2)),
    (lambda r: MaxPool(2, 2, ceil_mode=True), (1, 5, 5, 2)),
    (lambda r: GlobalAvgPool(), (2, 4, 4, 3)),
])
def test_layer_gradients(layer_fn, shape):
    rng = np.random.default_rng(6)
    layer = layer_fn(rng)
    x = rng.standard_normal(shape)
    rep = grad_check(layer, None, x, tolerance=1e-5, seed=1)
    assert rep.passed, str(rep)
