"""Encoder: resolution contract, trans-heads, transformer taps and the pyramidal attention block."""
import numpy as np
import pytest

from pyrasal import functional as F
from pyrasal import gradcheck
from pyrasal.encoder import (PYRAMID_LAYOUT, STREAMS, CNNStem, Encoder, EncoderConfig, FeaturePyramid,
                             PyramidAttention, TransformerStages, TransHead)
from pyrasal.nn import BatchNorm2d, Conv2d
from pyrasal.tensor import ShapeError, Tensor


def small_cfg(size=32, **kw):
    base = dict(input_h=size, input_w=size, stem_channels=(4, 6), transformer_depth=2,
                transformer_stage_taps=(1, 2), token_dim=8, transformer_heads=2, d_feat=8, pyramid_heads=2,
                daspp_branch_channels=4)
    base.update(kw)
    return EncoderConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = EncoderConfig()
        assert (cfg.input_h, cfg.d_feat, cfg.transformer_stage_taps, cfg.cnn_block_taps) == (64, 256, (3, 4), (1, 2))
        assert cfg.grid == (4, 4) and cfg.num_patches == 16

    @pytest.mark.parametrize("kw", [dict(input_h=40), dict(transformer_stage_taps=(2, 2)),
                                    dict(transformer_stage_taps=(3, 5)), dict(cnn_block_taps=(2, 1)),
                                    dict(token_dim=10, transformer_heads=4), dict(patch_size=8)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EncoderConfig(**kw)

    def test_stream_sizes(self):
        cfg = EncoderConfig()
        assert [cfg.stream_size(n) for n in range(1, 5)] == [(32, 32), (16, 16), (8, 8), (4, 4)]


class TestStem:
    def test_resolutions(self, rng):
        cfg = small_cfg(64)
        a, b = CNNStem(cfg, rng)(Tensor(rng.normal(size=(2, 3, 64, 48))))
        assert a.shape == (2, 4, 32, 24) and b.shape == (2, 6, 16, 12)

    def test_zero_input_zero_features(self, rng):
        stem = CNNStem(small_cfg(), rng).eval()
        a, b = stem(Tensor(np.zeros((1, 3, 32, 32))))
        assert not a.data.any() and not b.data.any()

    def test_param_count_formula(self, rng):
        cfg = small_cfg(stem_channels=(5, 7))
        stem = CNNStem(cfg, rng)
        enumerated = 0
        for _, m in stem.named_modules():
            if isinstance(m, Conv2d):
                enumerated += m.out_ch * m.in_ch * m.k * m.k + (m.out_ch if m.bias is not None else 0)
            elif isinstance(m, BatchNorm2d):
                enumerated += 2 * m.gamma.size
        assert stem.num_parameters() == enumerated == CNNStem.param_count(cfg)

    def test_indivisible_input(self, rng):
        with pytest.raises(ShapeError):
            CNNStem(small_cfg(), rng)(Tensor(np.zeros((1, 3, 24, 32))))


def _np_layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps) * g + b


def _np_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def _np_block(t, blk):
    p = {k: v.data for k, v in blk.attn._params.items()}
    h = _np_layernorm(t, blk.ln1.gamma.data, blk.ln1.beta.data)
    q, k, v = h @ p["wq"] + p["bq"], h @ p["wk"] + p["bk"], h @ p["wv"] + p["bv"]
    s = q @ k.T / np.sqrt(q.shape[-1])
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    t = t + (a @ v) @ p["wo"] + p["bo"]
    h = _np_layernorm(t, blk.ln2.gamma.data, blk.ln2.beta.data)
    h = _np_gelu(h @ blk.fc1.weight.data + blk.fc1.bias.data) @ blk.fc2.weight.data + blk.fc2.bias.data
    return t + h


def _pool_tokens(f, grid):
    c, h, w = f.shape
    k = h // grid
    return f.reshape(c, grid, k, grid, k).mean(axis=(2, 4)).reshape(c, -1).T


class TestTransformerStages:
    def test_resolutions(self, rng):
        cfg = small_cfg(64)
        ts = TransformerStages(cfg, rng)
        g, s = ts(Tensor(rng.normal(size=(1, 4, 32, 32))), Tensor(rng.normal(size=(1, 6, 16, 16))))
        assert g.shape == (1, 8, 8, 8) and s.shape == (1, 8, 4, 4)

    def test_only_needed_blocks_built(self, rng):
        ts = TransformerStages(small_cfg(transformer_depth=5, transformer_stage_taps=(2, 3)), rng)
        assert len(ts.blocks) == 3

    def test_embed_unembed_round_trip(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 3, 4)))
        back = F.unflatten_tokens(F.flatten_tokens(x), 3, 4)
        np.testing.assert_array_equal(back.data, x.data)
        assert F.flatten_tokens(x).shape == (2, 12, 5)

    def test_identity_projection_small_case_oracle(self, wide):
        """Two blocks, taps (1, 2), one head with identity projections, 2x2 token grid."""
        cfg = small_cfg(32, token_dim=4, transformer_heads=1, stem_channels=(2, 2))
        rng = np.random.default_rng(3)
        ts = TransformerStages(cfg, rng)
        for blk in ts.blocks:
            for name in ("q", "k", "v", "o"):
                getattr(blk.attn, f"w{name}").data = np.eye(4)
                getattr(blk.attn, f"b{name}").data = np.zeros(4)
        fa, fb = rng.normal(size=(1, 2, 16, 16)), rng.normal(size=(1, 2, 8, 8))
        t_gamma, t_sigma = ts.run_tokens(Tensor(fa), Tensor(fb))
        f_gamma, f_sigma = ts(Tensor(fa), Tensor(fb))

        tokens = np.concatenate([_pool_tokens(fa[0], 2), _pool_tokens(fb[0], 2)], axis=1)
        tg = _np_block(tokens @ ts.proj_gamma.weight.data + ts.proj_gamma.bias.data, ts.blocks[0])
        grid_gamma = tg.T.reshape(4, 2, 2)
        tokens = np.concatenate([tokens, _pool_tokens(grid_gamma, 2)], axis=1)
        tsig = _np_block(tokens @ ts.proj_sigma.weight.data + ts.proj_sigma.bias.data, ts.blocks[1])

        np.testing.assert_allclose(t_gamma.data[0], tg, atol=1e-12)
        np.testing.assert_allclose(t_sigma.data[0], tsig, atol=1e-12)
        np.testing.assert_allclose(f_sigma.data[0], tsig.T.reshape(4, 2, 2), atol=1e-12)
        # f_gamma is the 2x bilinear upsample of the tap-s_i grid
        np.testing.assert_allclose(f_gamma.data[0, :, 0, 0], grid_gamma[:, 0, 0], atol=1e-12)
        np.testing.assert_allclose(f_gamma.data[0, :, 1, 1],
                                   0.5625 * grid_gamma[:, 0, 0] + 0.1875 * (grid_gamma[:, 0, 1] + grid_gamma[:, 1, 0])
                                   + 0.0625 * grid_gamma[:, 1, 1], atol=1e-12)


class TestTransHead:
    def test_channels_and_layers(self, rng):
        head = TransHead(5, 16, rng)
        assert head(Tensor(rng.normal(size=(2, 5, 4, 4)))).shape == (2, 16, 4, 4)
        convs = [m for _, m in head.named_modules() if isinstance(m, Conv2d)]
        bns = [m for _, m in head.named_modules() if isinstance(m, BatchNorm2d)]
        assert len(convs) == 3 and len(bns) == 3

    def test_zero_params_zero_output(self, rng):
        head = TransHead(3, 4, rng)
        for p in head.parameters():
            p.data[...] = 0.0
        assert not head(Tensor(rng.normal(size=(2, 3, 4, 4)))).data.any()


def _pyramid(rng, cfg, n=1):
    return FeaturePyramid(*(Tensor(rng.normal(size=(n, cfg.d_feat) + cfg.stream_size(i)))
                            for i in range(1, 5)))


class TestPyramidAttention:
    def test_call_counts(self, rng):
        cfg = small_cfg(64)
        pa = PyramidAttention(cfg, rng)
        pa(_pyramid(rng, cfg))
        assert pa.call_counts() == {"alpha": (3, 1), "beta": (2, 1), "gamma": (1, 1), "sigma": (1, 0)}
        assert {k: (d, int(m)) for k, (d, m) in PYRAMID_LAYOUT.items()} == pa.call_counts()

    def test_shape_preserving(self, rng):
        cfg = small_cfg(32)
        pyr = _pyramid(rng, cfg, n=2)
        out = PyramidAttention(cfg, rng)(pyr)
        assert [t.shape for t in out.streams()] == [t.shape for t in pyr.streams()]

    def test_zero_params_is_skip_identity(self, rng):
        cfg = small_cfg(32)
        pa = PyramidAttention(cfg, rng)
        for p in pa.parameters():
            p.data[...] = 0.0
        pyr = _pyramid(rng, cfg)
        for a, b in zip(pa(pyr).streams(), pyr.streams()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_random_params_change_features(self, rng):
        cfg = small_cfg(32)
        pyr = _pyramid(rng, cfg)
        out = PyramidAttention(cfg, rng)(pyr)
        for a, b in zip(out.streams(), pyr.streams()):
            assert np.linalg.norm(a.data - b.data) > 0

    def test_pass_through_has_no_parameters(self, rng):
        cfg = small_cfg(32)
        pa = PyramidAttention(cfg, rng, pass_through=True)
        pyr = _pyramid(rng, cfg)
        assert pa.parameters() == [] and pa(pyr) is pyr

    def test_rates_clipped_to_stream_size(self, rng):
        pa = PyramidAttention(small_cfg(32), rng)
        assert pa.sigma.daspp[0].cfg.dilation_rates == (1,)
        assert pa.alpha.daspp[0].cfg.dilation_rates == (1, 2, 4)


class TestEncoder:
    def test_resolution_contract(self, rng):
        cfg = small_cfg(64)
        pyr = Encoder(cfg, rng)(Tensor(rng.uniform(size=(2, 3, 64, 64))))
        assert [t.shape for t in pyr.streams()] == [(2, 8, 32, 32), (2, 8, 16, 16), (2, 8, 8, 8), (2, 8, 4, 4)]

    def test_default_width_is_256(self, rng):
        pyr = Encoder(EncoderConfig(), rng)(Tensor(rng.uniform(size=(1, 3, 64, 64))))
        assert all(t.shape[1] == 256 for t in pyr.streams())

    def test_streams_named_in_order(self):
        assert STREAMS == ("alpha", "beta", "gamma", "sigma")

    def test_gradients(self):
        res = gradcheck.run(["encoder"])[0]
        assert res.passed, res
