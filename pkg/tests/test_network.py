import numpy as np
import pytest

from handnet.network import (ABLATIONS, PRESETS, Network, NetworkConfig,
                             ablation_config, count_flops, count_params,
                             default_config, load_weights, micro_config,
                             save_weights, tiny_config)
from handnet.tensor import ConfigError, FormatError

# frozen goldens for the shipped presets; any structural change must
# update these on purpose, not by accident
GOLDEN_PARAMS = {"default": 2_019_708, "tiny": 70_106, "micro": 17_578}
GOLDEN_TRACE = [224, 112, 56, 28, 14, 7, 4, 2, 1]


class TestConfig:
    def test_validate_transition_count(self):
        with pytest.raises(ConfigError):
            NetworkConfig(blocks=(2, 2), transitions=(16, 16)).validate()

    def test_validate_pooling(self):
        with pytest.raises(ConfigError):
            NetworkConfig(pooling="stochastic").validate()

    def test_validate_spatial_collapse(self):
        cfg = NetworkConfig(input_h=4, input_w=4,
                            blocks=(1,) * 6, transitions=(8,) * 5)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_canonical_text_round_trip(self):
        cfg = tiny_config()
        text = cfg.canonical_text()
        back = NetworkConfig.from_text(text)
        assert back == cfg
        assert back.canonical_text() == text

    def test_canonical_text_is_sorted_and_stable(self):
        lines = default_config().canonical_text().strip().splitlines()
        keys = [ln.split(" = ")[0] for ln in lines]
        assert keys == sorted(keys)
        assert default_config().canonical_text() == \
            default_config().canonical_text()

    def test_from_text_unknown_key(self):
        with pytest.raises(ConfigError, match="dropout"):
            NetworkConfig.from_text("dropout = 0.5\n")

    def test_from_text_bad_value(self):
        with pytest.raises(ConfigError):
            NetworkConfig.from_text("growth = ten\n")

    def test_from_text_partial_overlay(self):
        cfg = NetworkConfig.from_text("pooling = max\ngrowth = 7\n")
        assert cfg.pooling == "max"
        assert cfg.growth == 7
        assert cfg.input_h == 224  # untouched default

    def test_bool_round_trip(self):
        cfg = NetworkConfig.from_text("attention = off\n")
        assert cfg.attention is False
        assert "attention = off" in cfg.canonical_text()


class TestPresets:
    def test_preset_names(self):
        assert set(PRESETS) >= {"default", "tiny", "micro"}

    @pytest.mark.parametrize("name", ["default", "tiny", "micro"])
    def test_param_golden(self, name):
        net = Network(PRESETS[name]().validate())
        assert count_params(net) == GOLDEN_PARAMS[name]

    def test_default_trace(self):
        assert Network(default_config()).spatial_trace() == GOLDEN_TRACE

    def test_default_param_budget(self):
        # headline budget: about 1.9M, allow 20% either way
        n = GOLDEN_PARAMS["default"]
        assert 0.8 * 1.9e6 <= n <= 1.2 * 1.9e6

    def test_itemized_sums_to_total(self):
        net = Network(tiny_config())
        total, items = count_params(net, itemized=True)
        assert total == sum(v for _, v in items)
        assert all(v > 0 for _, v in items)

    def test_flop_report_consistent(self):
        net = Network(tiny_config())
        rep = count_flops(net)
        assert rep.total_macs == sum(m for _, m in rep.items)
        assert rep.total_flops == 2 * rep.total_macs

    def test_default_macs_magnitude(self):
        rep = count_flops(Network(default_config()))
        assert 1e9 < rep.total_macs < 1e10


class TestAblations:
    def test_table_complete(self):
        assert sorted(ABLATIONS) == list(range(1, 13))
        combos = set(ABLATIONS.values())
        assert len(combos) == 12  # all distinct

    def test_covers_full_grid(self):
        want = {(a, p, act)
                for a in (True, False)
                for p in ("blur", "average", "max")
                for act in ("mish", "relu")}
        assert set(ABLATIONS.values()) == want

    @pytest.mark.parametrize("arch", sorted(ABLATIONS))
    def test_build_and_forward(self, arch):
        base = tiny_config()
        cfg = ablation_config(arch, base=base).validate()
        att, pool, act = ABLATIONS[arch]
        assert cfg.attention is att
        assert cfg.pooling == pool
        assert cfg.activation == act
        net = Network(cfg)
        rng = np.random.default_rng(arch)
        x = rng.random((1, cfg.input_h, cfg.input_w, 3), dtype=np.float32)
        out = net.forward_raw(x)
        assert out.shape == (1, 1, 1, 42)
        assert np.all(np.isfinite(out))

    def test_bad_arch_number(self):
        with pytest.raises(ConfigError):
            ablation_config(13)


class TestNetworkOutput:
    def test_head_is_42_numbers(self):
        net = Network(micro_config())
        x = np.random.default_rng(0).random((3, 16, 16, 3), dtype=np.float32)
        y = net.forward_raw(x)
        assert y.shape == (3, 1, 1, 42)

    def test_predict_scales_to_pixels(self):
        cfg = micro_config()
        net = Network(cfg)
        x = np.random.default_rng(1).random((2, 16, 16, 3), dtype=np.float32)
        raw = net.forward_raw(x).reshape(2, 21, 2)
        px = net.predict(x)
        assert px.shape == (2, 21, 2)
        assert np.allclose(px[..., 0], raw[..., 0] * cfg.input_w, atol=1e-5)
        assert np.allclose(px[..., 1], raw[..., 1] * cfg.input_h, atol=1e-5)

    def test_forward_returns_keypoint_sets(self):
        net = Network(micro_config())
        x = np.random.default_rng(2).random((2, 16, 16, 3), dtype=np.float32)
        sets = net.forward(x)
        assert len(sets) == 2
        assert sets[0].points.shape == (21, 2)

    def test_train_infer_differ_through_norm(self):
        # batch norm uses batch statistics only in train mode
        net = Network(micro_config())
        x = np.random.default_rng(3).random((4, 16, 16, 3), dtype=np.float32)
        a = net.forward_raw(x, train=True)
        b = net.forward_raw(x, train=False)
        assert not np.allclose(a, b)

    def test_seed_reproducible_init(self):
        a = Network(micro_config(), seed=7)
        b = Network(micro_config(), seed=7)
        for (na, pa, _), (nb, pb, _) in zip(a.named_items(),
                                            b.named_items()):
            assert na == nb
            assert np.array_equal(pa, pb)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        net = Network(micro_config(), seed=3)
        p = tmp_path / "m.aapw"
        save_weights(net, p)
        back = load_weights(p)
        assert back.cfg == net.cfg
        for (na, pa, _), (nb, pb, _) in zip(net.named_items(),
                                            back.named_items()):
            assert na == nb
            assert np.array_equal(pa, pb)
        x = np.random.default_rng(4).random((1, 16, 16, 3), dtype=np.float32)
        assert np.array_equal(net.forward_raw(x), back.forward_raw(x))

    def test_round_trip_float64(self, tmp_path):
        net = Network(micro_config(), seed=5, dtype=np.float64)
        p = tmp_path / "m64.aapw"
        save_weights(net, p)
        back = load_weights(p)
        assert back.dtype == np.float64
        for (_, pa, _), (_, pb, _) in zip(net.named_items(),
                                          back.named_items()):
            assert np.array_equal(pa, pb)

    def test_expected_config_mismatch(self, tmp_path):
        net = Network(micro_config())
        p = tmp_path / "m.aapw"
        save_weights(net, p)
        with pytest.raises(FormatError, match="different configuration"):
            load_weights(p, expected_config=tiny_config())

    def test_corrupt_config_hash(self, tmp_path):
        net = Network(micro_config())
        p = tmp_path / "m.aapw"
        save_weights(net, p)
        raw = bytearray(p.read_bytes())
        # flip a byte inside the embedded config text
        raw[20] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_weights(p)

    def test_truncated_file(self, tmp_path):
        net = Network(micro_config())
        p = tmp_path / "m.aapw"
        save_weights(net, p)
        q = tmp_path / "cut.aapw"
        q.write_bytes(p.read_bytes()[: p.stat().st_size // 2])
        with pytest.raises(FormatError, match="truncated"):
            load_weights(q)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.aapw"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_weights(p)
