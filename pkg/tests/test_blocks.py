import numpy as np
import pytest

from handnet.blocks import (AAInvertedBottleneck, BlockConfig, DenseBlock,
                            InvertedBottleneck, TransitionLayer)
from handnet.gradcheck import grad_check
from handnet.tensor import ConfigError


def cfg_plain(**kw):
    base = dict(e=2, k=3, activation="mish", attention=False)
    base.update(kw)
    return BlockConfig(**base)


class TestBlockConfig:
    def test_width_growth_mode(self):
        c = BlockConfig(e=4, k=10)
        assert c.width(3) == 40
        assert c.width(144) == 40  # independent of input depth

    def test_width_input_mode(self):
        c = BlockConfig(e=4, k=10, width_mode="input")
        assert c.width(3) == 12
        assert c.width(7) == 28

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            BlockConfig(e=0, k=10)
        with pytest.raises(ConfigError):
            BlockConfig(e=4, k=10, activation="gelu")
        with pytest.raises(ConfigError):
            BlockConfig(e=4, k=10, width_mode="other")


class TestInvertedBottleneck:
    def test_worked_param_count(self):
        # C_in=3, e=4, k=10, input-width expansion, no biases:
        # expand 3*12 + depthwise 9*12 + squeeze 12*10 = 264
        rng = np.random.default_rng(0)
        cfg = BlockConfig(e=4, k=10, width_mode="input", bias=False)
        m = InvertedBottleneck(3, cfg, rng)
        assert m.param_count() == 264

    def test_output_channels_equal_growth(self):
        rng = np.random.default_rng(1)
        m = InvertedBottleneck(7, cfg_plain(), rng)
        y = m.forward(np.random.default_rng(2).standard_normal((2, 5, 5, 7)))
        assert y.shape == (2, 5, 5, 3)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        m = InvertedBottleneck(4, cfg_plain(), rng)
        rep = grad_check(m, None, rng.standard_normal((2, 4, 4, 4)))
        assert rep.passed, str(rep)

    def test_relu_variant(self):
        rng = np.random.default_rng(4)
        m = InvertedBottleneck(3, cfg_plain(activation="relu"), rng)
        x = rng.standard_normal((1, 4, 4, 3))
        assert np.all(np.isfinite(m.forward(x)))


class TestAABottleneck:
    def make(self, rng, c_in=4, h=4, w=4, **kw):
        base = dict(e=2, k=3, activation="mish", attention=True,
                    kappa=0.5, u=0.5, n_h=2)
        base.update(kw)
        return AAInvertedBottleneck(c_in, h, w, BlockConfig(**base), rng)

    def test_forward_shape(self):
        rng = np.random.default_rng(5)
        m = self.make(rng)
        y = m.forward(rng.standard_normal((2, 4, 4, 4)))
        assert y.shape == (2, 4, 4, 3)

    def test_requires_attention_flag(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ConfigError):
            AAInvertedBottleneck(4, 4, 4, cfg_plain(), rng)

    def test_zeroing_attention_branch_degrades_to_separable(self):
        # with the AAC branch silenced, the block reduces to
        # expand -> act -> separable -> act -> squeeze
        rng = np.random.default_rng(7)
        m = self.make(rng)
        m.aac.conv.w[...] = 0.0
        if m.aac.conv.b is not None:
            m.aac.conv.b[...] = 0.0
        for name in ("w_q", "w_k", "w_v", "w_o"):
            getattr(m.aac.att, name)[...] = 0.0
        x = rng.standard_normal((1, 4, 4, 4))
        got = m.forward(x)

        from handnet import ops
        e = ops.mish(ops.conv2d(x, m.expand.w, bias=m.expand.b))
        sep = ops.conv2d(ops.depthwise_conv(e, m.sep_dw.w, bias=m.sep_dw.b),
                         m.sep_pw.w, bias=m.sep_pw.b)
        want = ops.conv2d(ops.mish(sep), m.squeeze.w, bias=m.squeeze.b)
        assert np.allclose(got, want, atol=1e-12)

    def test_attention_branch_contributes(self):
        rng = np.random.default_rng(8)
        m = self.make(rng)
        x = rng.standard_normal((1, 4, 4, 4))
        y_full = m.forward(x)
        m.aac.att.w_v[...] = 0.0
        m.aac.conv.w[...] = 0.0
        y_cut = m.forward(x)
        assert not np.allclose(y_full, y_cut)

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        m = self.make(rng, c_in=3, h=3, w=3)
        rep = grad_check(m, None, rng.standard_normal((1, 3, 3, 3)),
                         tolerance=1e-5, seed=3)
        assert rep.passed, str(rep)


class TestDenseBlock:
    def test_channel_growth(self):
        rng = np.random.default_rng(10)
        b = DenseBlock(5, 3, cfg_plain(), rng)
        assert b.c_out == 5 + 3 * 3
        y = b.forward(rng.standard_normal((1, 4, 4, 5)))
        assert y.shape[-1] == b.c_out

    def test_prefix_is_identity_on_input(self):
        # the first c_in channels of the output are the block input
        rng = np.random.default_rng(11)
        b = DenseBlock(4, 2, cfg_plain(), rng)
        x = rng.standard_normal((2, 3, 3, 4))
        y = b.forward(x)
        assert np.array_equal(y[..., :4], x)

    def test_each_layer_sees_all_previous(self):
        rng = np.random.default_rng(12)
        b = DenseBlock(3, 3, cfg_plain(), rng)
        assert b.layers[0].c_in == 3
        assert b.layers[1].c_in == 6
        assert b.layers[2].c_in == 9

    def test_gradcheck(self):
        rng = np.random.default_rng(13)
        b = DenseBlock(3, 2, cfg_plain(), rng)
        rep = grad_check(b, None, rng.standard_normal((1, 4, 4, 3)), seed=4)
        assert rep.passed, str(rep)

    def test_attention_variant_needs_spatial(self):
        rng = np.random.default_rng(14)
        acfg = BlockConfig(e=2, k=3, attention=True, kappa=0.5, u=0.5, n_h=2)
        with pytest.raises(ConfigError):
            DenseBlock(3, 1, acfg, rng)  # no h, w supplied

    def test_mixed_gradcheck_with_attention(self):
        rng = np.random.default_rng(15)
        acfg = BlockConfig(e=2, k=3, attention=True, kappa=0.5, u=0.5, n_h=2)
        b = DenseBlock(3, 2, acfg, rng, np.float64, h=3, w=3)
        rep = grad_check(b, None, rng.standard_normal((1, 3, 3, 3)), seed=5)
        assert rep.passed, str(rep)


class TestTransition:
    @pytest.mark.parametrize("pooling", ["blur", "avg", "max"])
    def test_halves_spatial(self, pooling):
        rng = np.random.default_rng(16)
        t = TransitionLayer(6, 4, pooling, rng)
        y = t.forward(rng.standard_normal((1, 8, 8, 6)), train=True)
        assert y.shape == (1, 4, 4, 4)

    def test_odd_input_ceil(self):
        rng = np.random.default_rng(17)
        t = TransitionLayer(3, 2, "blur", rng)
        y = t.forward(rng.standard_normal((1, 7, 7, 3)), train=True)
        assert y.shape == (1, 4, 4, 2)

    def test_conv_has_no_bias(self):
        # batch norm follows immediately, a conv bias would be redundant
        rng = np.random.default_rng(18)
        t = TransitionLayer(3, 2, "avg", rng)
        assert t.conv.b is None

    @pytest.mark.parametrize("pooling", ["blur", "avg", "max"])
    def test_gradcheck(self, pooling):
        rng = np.random.default_rng(19)
        t = TransitionLayer(3, 2, pooling, rng)
        rep = grad_check(t, None, rng.standard_normal((2, 6, 6, 3)), seed=6)
        assert rep.passed, str(rep)

    def test_unknown_pooling(self):
        rng = np.random.default_rng(20)
        with pytest.raises((ConfigError, KeyError)):
            TransitionLayer(3, 2, "stochastic", rng)
