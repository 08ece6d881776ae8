import numpy as np
import pytest

from facediv.losses import lmf_keep_count
from facediv.network import (Model, NetConfig, build, forward, load_checkpoint, full_scale_config,
                             save_checkpoint, toy_config, truncated_normal)
from facediv.tensor import Graph, check_gradients, softmax_xent


def tiny_config(**kw):
    base = dict(input_size=8, blocks=(((2, 1), (3, 2)), ((3, 2), (4, 1)), ((4, 2), (4, 1))),
                mid_block=1, proj_width=2, K=3, hc_resolution=2, d_percent=50.0, num_classes=3)
    base.update(kw)
    return NetConfig(**base)


class TestConfig:
    def test_toy_parameter_count(self):
        # conv blocks, one 1x1 projection, 32x40x3x3 filter bank, 20-way classifier
        convs = [(1, 8), (8, 16), (16, 16), (16, 24), (24, 24), (24, 32)]
        expected = sum(9 * a * b + b for a, b in convs) + (32 * 16 + 16) + 32 * 40 * 9 + (20 * 32 + 20)
        assert build(toy_config()).parameter_count == expected == 31908

    def test_toy_resolutions(self):
        cfg = toy_config()
        assert cfg.block_resolutions() == [16, 8, 4]
        assert cfg.hc_channels == 40

    def test_full_scale_preset_shapes(self):
        cfg = full_scale_config()
        assert cfg.hc_channels == 576
        assert cfg.block_resolutions()[cfg.mid_block] == 24
        assert lmf_keep_count(cfg.d_percent, 24 * 24) == 24

    def test_full_scale_preset_forward(self):
        cfg = full_scale_config(num_classes=10)
        out = forward(build(cfg), np.random.default_rng(0).random((3, 96, 96)))
        assert out.phi.shape == (576, 24, 24)
        assert out.psi.shape == (320, 24, 24)
        assert np.all(np.count_nonzero(out.psi_lmf.values.reshape(320, -1), axis=1) <= 24)
        assert out.logits.shape == (10,)

    @pytest.mark.parametrize("kw", [
        dict(hc_resolution=4), dict(mid_block=0), dict(mid_block=5), dict(d_percent=100.0),
        dict(d_percent=-1.0), dict(init="xavier"), dict(upsample_mode="cubic"), dict(num_classes=1),
        dict(K=0), dict(input_size=30),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            toy_config(**kw)

    def test_json_round_trip(self):
        cfg = tiny_config(input_mean=0.25)
        assert NetConfig.from_json(cfg.to_json()) == cfg


class TestForward:
    def test_shapes(self):
        model = build(toy_config(), np.random.default_rng(0))
        out = forward(model, np.random.default_rng(1).random((5, 1, 32, 32)))
        assert out.phi.shape == (5, 40, 8, 8)
        assert out.psi.shape == (5, 32, 8, 8)
        assert out.feature.shape == (5, 32)
        assert out.logits.shape == (5, 20)
        nz = np.count_nonzero(out.psi_lmf.values.reshape(5, 32, -1), axis=2)
        assert nz.max() <= lmf_keep_count(95.83, 64) == 3

    def test_deterministic_build_and_forward(self):
        a = build(toy_config(), np.random.default_rng(3))
        b = build(toy_config(), np.random.default_rng(3))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
        x = np.random.default_rng(0).random((2, 1, 32, 32))
        np.testing.assert_array_equal(forward(a, x).logits.values, forward(b, x).logits.values)

    def test_zero_weights_give_uniform_softmax(self):
        model = build(toy_config())
        for v in model.params.values():
            v[...] = 0.0
        logits = forward(model, np.random.default_rng(0).random((1, 32, 32))).logits.values
        p = np.exp(logits - logits.max())
        np.testing.assert_allclose(p / p.sum(), np.full(20, 1 / 20), atol=1e-15)

    def test_feature_is_pooled_filtered_response(self):
        model = build(toy_config(), np.random.default_rng(0))
        out = forward(model, np.random.default_rng(2).random((3, 1, 32, 32)))
        np.testing.assert_allclose(out.feature.values, out.psi_lmf.values.mean(axis=(2, 3)), atol=1e-15)

    def test_psi_is_signed(self):
        model = build(toy_config(), np.random.default_rng(0))
        psi = forward(model, np.random.default_rng(2).random((2, 1, 32, 32))).psi.values
        assert psi.min() < 0 < psi.max()

    def test_input_mean_subtracted(self):
        model = build(toy_config(input_mean=0.5), np.random.default_rng(0))
        shifted = Model(toy_config(input_mean=0.0), model.params)
        x = np.random.default_rng(1).random((1, 1, 32, 32))
        np.testing.assert_array_equal(forward(model, x).psi.values, forward(shifted, x - 0.5).psi.values)

    def test_d_override(self):
        model = build(toy_config(), np.random.default_rng(0))
        x = np.random.default_rng(1).random((1, 1, 32, 32))
        out = forward(model, x, d_percent=0.0)
        np.testing.assert_array_equal(out.psi_lmf.values, out.psi.values)

    def test_bad_shape(self):
        with pytest.raises(ValueError, match="expected images"):
            forward(build(toy_config()), np.zeros((1, 3, 32, 32)))

    def test_shared_graph_binds_same_parameters(self):
        model = build(tiny_config(), np.random.default_rng(0))
        g = Graph()
        a = forward(model, np.random.default_rng(1).random((1, 8, 8)), g)
        forward(model, np.random.default_rng(2).random((1, 8, 8)), g)
        assert len(g.params) == len(model.params)
        assert a.graph is g

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        model = build(tiny_config(upsample_mode="bilinear" if seed % 2 else "nearest"), rng)
        g = Graph()
        out = forward(model, rng.random((2, 1, 8, 8)), g)
        loss = softmax_xent(out.logits, rng.integers(0, 3, size=2))
        assert check_gradients(g, loss) < 1e-4


class TestInit:
    def test_truncated_normal_bounds(self):
        x = truncated_normal(np.random.default_rng(0), (20000,), 0.5)
        assert np.abs(x).max() <= 1.0
        assert 0.4 < x.std() < 0.5

    def test_trunc_normal_init_std(self):
        model = build(tiny_config(init="trunc_normal", init_std=0.02), np.random.default_rng(0))
        w = np.concatenate([v.ravel() for k, v in model.params.items() if k.endswith("w")])
        assert np.abs(w).max() <= 0.04
        assert all(not v.any() for k, v in model.params.items() if k.endswith(".b"))

    def test_parameter_order(self):
        names = list(build(toy_config()).params)
        assert names[:2] == ["conv11.w", "conv11.b"]
        assert names[-4:] == ["proj3.b", "filters", "cls.w", "cls.b"]


class TestCheckpoint:
    def test_byte_exact_round_trip(self, tmp_path):
        model = build(toy_config(input_mean=0.5), np.random.default_rng(4))
        save_checkpoint(tmp_path / "a.bin", model, extra={"epoch": 3})
        again, meta = load_checkpoint(tmp_path / "a.bin", with_meta=True)
        assert meta == {"epoch": 3}
        assert again.config == model.config
        assert list(again.params) == list(model.params)
        for k in model.params:
            np.testing.assert_array_equal(again.params[k], model.params[k])
        save_checkpoint(tmp_path / "b.bin", again, extra={"epoch": 3})
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"hello\nend\n")
        with pytest.raises(ValueError, match="not a facediv checkpoint"):
            load_checkpoint(tmp_path / "x.bin")

    def test_rejects_trailing_bytes(self, tmp_path):
        save_checkpoint(tmp_path / "a.bin", build(tiny_config()))
        with open(tmp_path / "a.bin", "ab") as fh:
            fh.write(b"\0" * 8)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "a.bin")
