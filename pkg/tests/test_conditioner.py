import numpy as np
import pytest

import triplanegen.autodiff as ad
from triplanegen.autodiff import Tensor
from triplanegen.conditioner import (DecoderConfig, StyleVector, TextCondition,
                                     adain, build_decoder_params,
                                     cross_attention, decode,
                                     desk_decoder_config, paper_decoder_config,
                                     style_inject, style_vector_dim,
                                     token_to_plane)
from triplanegen.prompts import SyntheticEmbedder, embed


@pytest.fixture(scope="module")
def cond():
    return embed("a panda wearing a beret", SyntheticEmbedder())


@pytest.fixture(scope="module")
def desk_setup(cond):
    cfg = desk_decoder_config()
    rng = np.random.default_rng(0)
    params = build_decoder_params(cfg, cond.dim, cond.num_tokens, rng)
    return cfg, {k: Tensor(v) for k, v in params.items()}, params


class TestTextCondition:
    def test_valid(self, cond):
        assert cond.num_tokens == 16
        assert cond.dim == 64

    def test_empty_tokens_rejected(self):
        with pytest.raises(ValueError):
            TextCondition(np.zeros((0, 8)), np.ones(8))

    def test_nonfinite_rejected(self):
        t = np.zeros((2, 4))
        t[0, 0] = np.nan
        with pytest.raises(ValueError):
            TextCondition(t, np.ones(4))

    def test_zero_sentence_rejected(self):
        with pytest.raises(ValueError):
            TextCondition(np.ones((2, 4)), np.zeros(4))


class TestDecoderConfig:
    def test_resolution_constraint(self):
        with pytest.raises(ValueError):
            DecoderConfig(base_resolution=8, stages=3, out_resolution=128)

    def test_multiplier_count(self):
        with pytest.raises(ValueError):
            DecoderConfig(channel_multipliers=(2, 2), stages=3)

    def test_paper_config(self):
        cfg = paper_decoder_config()
        assert cfg.out_resolution == 256
        assert cfg.base_resolution * 2 ** cfg.stages == 256
        assert cfg.stage_channels == [320, 320, 160, 80, 80]
        assert cfg.out_channels == 32

    def test_desk_config(self):
        cfg = desk_decoder_config()
        assert cfg.out_resolution == 64
        assert cfg.stage_channels == [32, 32, 16]


class TestParams:
    def test_token_mismatch_rejected(self, cond):
        # 64*16 base values cannot be split across 7 tokens
        with pytest.raises(ValueError):
            build_decoder_params(desk_decoder_config(), cond.dim, 7,
                                 np.random.default_rng(0))

    def test_names_and_init(self, desk_setup):
        _, _, raw = desk_setup
        assert "decoder.t2p.reduce.weight" in raw
        assert "decoder.stage0.block0.self.q.weight" in raw
        assert "decoder.stage2.block1.conv.weight" in raw
        assert "decoder.final.weight" in raw
        for name, v in raw.items():
            if name.endswith(".bias"):
                np.testing.assert_array_equal(v, 0.0)
            else:
                assert np.abs(v).max() <= 0.04 + 1e-6  # trunc normal at 2 sigma
            assert v.dtype == np.float32

    def test_later_stages_conv_only(self, desk_setup):
        _, _, raw = desk_setup
        # stage depth beyond the attention stages would carry no .self params;
        # the desk config has 3 stages, all with attention
        assert "decoder.stage2.block0.self.q.weight" in raw

    def test_deterministic(self, cond):
        a = build_decoder_params(desk_decoder_config(), cond.dim,
                                 cond.num_tokens, np.random.default_rng(3))
        b = build_decoder_params(desk_decoder_config(), cond.dim,
                                 cond.num_tokens, np.random.default_rng(3))
        assert sorted(a) == sorted(b)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


class TestBlocks:
    def test_token_to_plane_shape(self, cond, desk_setup):
        cfg, P, _ = desk_setup
        x = token_to_plane(cond, P, cfg)
        assert x.data.shape == (cfg.base_channel, 8, 8)

    def test_style_vector_dims(self, cond, desk_setup):
        cfg, P, _ = desk_setup
        noise = np.random.default_rng(0).normal(size=cfg.style_noise_dim)
        sv = style_inject(cond, noise, P, cfg)
        assert sv.values.data.shape == (style_vector_dim(cfg, cond.num_tokens),)
        assert sv.text_dim == cond.num_tokens * cfg.style_token_dim
        # the noise tail passes through verbatim
        np.testing.assert_allclose(sv.values.data[-cfg.style_noise_dim:],
                                   noise.astype(np.float32), atol=1e-6)

    def test_style_noise_shape_rejected(self, cond, desk_setup):
        cfg, P, _ = desk_setup
        with pytest.raises(ad.ShapeError):
            style_inject(cond, np.zeros(3), P, cfg)

    def test_adain_standardizes(self):
        rng = np.random.default_rng(0)
        C = 4
        x = Tensor(rng.normal(2.0, 3.0, size=(C, 6, 6)).astype(np.float32))
        style = StyleVector(Tensor(rng.normal(size=10).astype(np.float32)),
                            text_dim=6, noise_dim=4)
        # weights chosen so predicted scale == 1 and bias == 0
        P = {"blk.adain.weight": Tensor(np.zeros((10, 2 * C), dtype=np.float32)),
             "blk.adain.bias": Tensor(np.concatenate(
                 [np.ones(C), np.zeros(C)]).astype(np.float32))}
        out = adain(x, style, P, "blk.adain").data
        np.testing.assert_allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=(1, 2)), 1.0, atol=1e-3)

    def test_cross_attention_residual(self, cond):
        rng = np.random.default_rng(1)
        C = 8
        x = Tensor(rng.normal(size=(C, 4, 4)).astype(np.float32))
        P = {}
        for part in ("q", "k", "v", "out"):
            d_in = C if part in ("q", "out") else cond.dim
            P[f"xa.{part}.weight"] = Tensor(
                rng.normal(size=(d_in, C)).astype(np.float32) * 0.1)
            P[f"xa.{part}.bias"] = Tensor(np.zeros(C, dtype=np.float32))
        # zero out-projection turns the block into the identity
        P["xa.out.weight"] = Tensor(np.zeros((C, C), dtype=np.float32))
        out = cross_attention(x, cond, P, "xa", heads=2)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)


class TestDecode:
    def test_output_shapes(self, cond, desk_setup):
        cfg, P, _ = desk_setup
        noise = np.zeros(cfg.style_noise_dim, dtype=np.float32)
        tp = decode(cond, noise, cfg, P)
        for plane in tp.planes:
            assert plane.data.shape == (cfg.out_channels, 64, 64)

    def test_deterministic(self, cond, desk_setup):
        cfg, P, _ = desk_setup
        noise = np.ones(cfg.style_noise_dim, dtype=np.float32)
        a = decode(cond, noise, cfg, P)
        b = decode(cond, noise, cfg, P)
        np.testing.assert_array_equal(a.xy.data, b.xy.data)

    def test_noise_changes_output(self, cond, desk_setup):
        cfg, P, _ = desk_setup
        rng = np.random.default_rng(0)
        a = decode(cond, rng.normal(size=cfg.style_noise_dim), cfg, P)
        b = decode(cond, rng.normal(size=cfg.style_noise_dim), cfg, P)
        assert not np.allclose(a.xy.data, b.xy.data)

    def test_text_changes_output(self, cond, desk_setup):
        cfg, P, _ = desk_setup
        other = embed("a fox wearing a tophat", SyntheticEmbedder())
        noise = np.zeros(cfg.style_noise_dim, dtype=np.float32)
        a = decode(cond, noise, cfg, P)
        b = decode(other, noise, cfg, P)
        assert not np.allclose(a.xy.data, b.xy.data)
