import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcdseg.errors import CheckpointError, ShapeError
from mcdseg.layers import BatchNormLayer, ConvLayer, conv2d
from mcdseg.tensor import Tensor, backward, grad_check, mul, tsum
from mcdseg.unet import (REFERENCE_PARAM_COUNT, UNetConfig, analytic_param_count, build_unet, forward_seg,
                         load_checkpoint, param_count, predict_proba, read_checkpoint_header,
                         save_checkpoint, solve_base_width)


def small(**kw):
    base = dict(base_width=2, depth=2, input_extent=8, dropout_rate=0.1)
    base.update(kw)
    return UNetConfig(**base)


def spreadsheet_count(cin, base, depth, k):
    """Row-by-row tally of every weight layer; a 3x3 conv with BN has 9*in*out + out + 2*out scalars."""
    rows = []
    widths = [base * 2 ** i for i in range(depth + 1)]
    c = cin
    for w in widths:  # encoder levels then bottleneck
        for _ in range(k):
            rows.append((c, w))
            c = w
    for w in reversed(widths[:-1]):
        c = c + w
        for _ in range(k):
            rows.append((c, w))
            c = w
    total = 0
    for i, o in rows:
        total += 9 * i * o + o + 2 * o
    return total + c + 1, len(rows) + 1


class TestArchitecture:
    def test_23_conv_layers(self):
        model = build_unet(UNetConfig(depth=5, conv_per_block=2))
        assert len(model.conv_layers()) == 23
        assert model.config.conv_layer_count == 23

    def test_bottleneck_extent(self):
        cfg = UNetConfig(depth=5, input_extent=64)
        assert cfg.bottleneck_extent == 2
        model = build_unet(cfg)
        seen = {}

        import mcdseg.unet as unet_mod
        orig = unet_mod._run_unit

        def spy(x, u, mode, rng, slope):
            if u is model.bottleneck[0]:
                seen["shape"] = x.shape
            return orig(x, u, mode, rng, slope)

        unet_mod._run_unit = spy
        try:
            forward_seg(model, np.zeros((1, 3, 64, 64)))
        finally:
            unet_mod._run_unit = orig
        assert seen["shape"][2:] == (2, 2)

    def test_reference_param_count_near_494k(self):
        model = build_unet(UNetConfig())
        n = param_count(model)
        assert n == 493_553
        assert abs(n - REFERENCE_PARAM_COUNT) <= 0.05 * REFERENCE_PARAM_COUNT
        assert solve_base_width() == 4

    @pytest.mark.parametrize("base,depth,k", [(4, 5, 2), (2, 2, 2), (3, 3, 1), (8, 4, 3)])
    def test_param_count_matches_spreadsheet(self, base, depth, k):
        cfg = UNetConfig(base_width=base, depth=depth, conv_per_block=k, input_extent=2 ** depth * 2)
        expected, convs = spreadsheet_count(3, base, depth, k)
        model = build_unet(cfg)
        assert param_count(model) == expected == analytic_param_count(cfg)
        assert len(model.conv_layers()) == convs

    def test_param_count_single_layers(self):
        rng = np.random.default_rng(0)
        conv = ConvLayer.create(1, 1, 1, rng=rng)
        assert sum(t.size for t in conv.parameters()) == 2
        assert sum(t.size for t in BatchNormLayer.create(7).parameters()) == 14

    def test_param_count_independent_of_extent(self):
        assert param_count(build_unet(small(input_extent=8))) == param_count(build_unet(small(input_extent=32)))

    def test_dropout_before_every_conv(self):
        model = build_unet(small())
        assert len(model.dropout_layers()) == len(model.conv_layers())
        assert all(u.dropout is not None for u in model.units())
        assert not build_unet(small(mcd_enabled=False)).dropout_layers()

    def test_head_has_no_norm(self):
        model = build_unet(small())
        assert model.head.norm is None and model.head.conv.kernel_size == (1, 1)

    def test_invalid_extent(self):
        with pytest.raises(ShapeError):
            build_unet(UNetConfig(depth=5, input_extent=48))

    def test_skip_pairs(self):
        model = build_unet(small())
        assert model.skips == [(0, 1), (1, 0)]

    def test_config_roundtrip(self):
        cfg = small(seed=9)
        assert UNetConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            UNetConfig.from_dict({"bogus": 1})


class TestForward:
    def test_outputs_are_probabilities(self):
        model = build_unet(small())
        x = np.random.default_rng(0).random((2, 3, 8, 8))
        out = forward_seg(model, x, "inference").data
        assert out.shape == (2, 1, 8, 8)
        assert ((out > 0) & (out < 1)).all()

    def test_inference_bit_identical(self):
        model = build_unet(small())
        x = np.random.default_rng(1).random((1, 3, 8, 8))
        a = forward_seg(model, x, "inference").data
        b = forward_seg(model, x, "inference").data
        assert a.tobytes() == b.tobytes()

    def test_mc_active_zero_rate_bit_identical(self):
        model = build_unet(small(dropout_rate=0.0))
        x = np.random.default_rng(2).random((1, 3, 8, 8))
        a = forward_seg(model, x, "mc_active", np.random.default_rng(0)).data
        b = forward_seg(model, x, "mc_active", np.random.default_rng(1)).data
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() == forward_seg(model, x, "inference").data.tobytes()

    def test_zero_rate_matches_plain_graph(self):
        x = np.random.default_rng(3).random((2, 3, 8, 8))
        mcd = build_unet(small(dropout_rate=0.0, mcd_enabled=True))
        plain = build_unet(small(dropout_rate=0.0, mcd_enabled=False))
        assert param_count(mcd) == param_count(plain)
        for mode in ("train", "inference", "mc_active"):
            a = forward_seg(mcd, x, mode, np.random.default_rng(0)).data
            b = forward_seg(plain, x, mode, np.random.default_rng(0)).data
            assert a.tobytes() == b.tobytes()

    def test_mc_active_varies_with_rng(self):
        model = build_unet(small(dropout_rate=0.5))
        x = np.random.default_rng(4).random((1, 3, 8, 8))
        a = forward_seg(model, x, "mc_active", np.random.default_rng(0)).data
        b = forward_seg(model, x, "mc_active", np.random.default_rng(1)).data
        assert not np.array_equal(a, b)

    def test_mc_active_needs_rng(self):
        with pytest.raises(ValueError):
            forward_seg(build_unet(small()), np.zeros((1, 3, 8, 8)), "mc_active")

    def test_wrong_extent(self):
        with pytest.raises(ShapeError):
            forward_seg(build_unet(small()), np.zeros((1, 3, 6, 6)))

    @settings(max_examples=6, deadline=None)
    @given(st.integers(1, 3), st.sampled_from([1, 2]))
    def test_output_extent_equals_input(self, mult, depth):
        ext = mult * 2 ** depth
        model = build_unet(small(depth=depth, input_extent=ext))
        assert predict_proba(model, np.zeros((1, 3, ext, ext))).shape == (1, ext, ext)

    def test_whole_network_gradient(self):
        model = build_unet(small(depth=1, input_extent=4, dropout_rate=0.0, base_width=2))
        rng = np.random.default_rng(5)
        x = Tensor(rng.random((2, 3, 4, 4)))
        w = Tensor(rng.normal(size=(2, 1, 4, 4)))
        loss = lambda: tsum(mul(forward_seg(model, x, "train"), w))
        # a conv bias feeding train-mode batchnorm is cancelled by the batch mean: its gradient is exactly zero
        cancelled = {id(u.conv.bias) for u in model.units() if u.norm is not None}
        params = [t for _, t in model.parameters() if id(t) not in cancelled]
        assert grad_check(lambda: (params, loss)) < 1e-4
        backward(loss())
        for u in model.units():
            if u.norm is not None:
                np.testing.assert_allclose(u.conv.bias.grad, 0.0, atol=1e-12)


class TestCheckpoint:
    def trained_looking(self):
        model = build_unet(small(seed=3))
        rng = np.random.default_rng(0)
        for _, t in model.parameters():
            t.data[...] = rng.normal(size=t.shape)
        for bn in model.norms():
            bn.running_mean[:] = rng.normal(size=bn.channels)
            bn.running_var[:] = rng.uniform(0.5, 2, size=bn.channels)
        return model

    def test_roundtrip_exact(self, tmp_path):
        model = self.trained_looking()
        path = tmp_path / "m.mcdseg"
        blob = save_checkpoint(model, path, extra={"best_epoch": 4})
        assert path.read_bytes() == blob
        back = load_checkpoint(path)
        for (ka, a), (kb, b) in zip(model.parameters(), back.parameters()):
            assert ka == kb and a.data.tobytes() == b.data.tobytes()
        for (ka, a), (kb, b) in zip(model.buffers(), back.buffers()):
            assert ka == kb and a.tobytes() == b.tobytes()
        x = np.random.default_rng(1).random((1, 3, 8, 8))
        assert predict_proba(model, x).tobytes() == predict_proba(back, x).tobytes()
        assert save_checkpoint(back, extra={"best_epoch": 4}) == blob

    def test_header_contents(self):
        model = self.trained_looking()
        blob = save_checkpoint(model, extra={"note": "x"})
        assert blob.startswith(b"MCDSEG1")
        header = read_checkpoint_header(blob)
        assert header["widths"] == [2, 4, 8]
        assert header["config"]["depth"] == 2
        assert header["extra"] == {"note": "x"}
        (hlen,) = struct.unpack_from("<I", blob, 7)
        assert json.loads(blob[11:11 + hlen]) == header
        n_values = param_count(model) + sum(v.size for _, v in model.buffers())
        assert len(blob) == 11 + hlen + 8 * n_values + 8

    @pytest.mark.parametrize("pos", [3, 20, -100, -1])
    def test_corruption_detected(self, pos):
        blob = bytearray(save_checkpoint(self.trained_looking()))
        blob[pos] ^= 0x01
        with pytest.raises(CheckpointError):
            load_checkpoint(bytes(blob))

    def test_truncation_detected(self):
        blob = save_checkpoint(self.trained_looking())
        with pytest.raises(CheckpointError):
            load_checkpoint(blob[:-16])
