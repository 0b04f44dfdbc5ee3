"""Decoder: progressive fusion stages and the final saliency head."""
import numpy as np
import pytest

from pyrasal import functional as F
from pyrasal.decoder import DecodeStage, Decoder, decode_stage
from pyrasal.encoder import FeaturePyramid
from pyrasal.nn import channel_attention
from pyrasal.tensor import ShapeError, Tensor, concat_channels, sigmoid

D = 8


def pyramid(rng, size=32, n=1, d=D):
    return FeaturePyramid(*(Tensor(rng.normal(size=(n, d, size // 2 ** i, size // 2 ** i))) for i in range(1, 5)))


class TestDecodeStage:
    def test_output_matches_shallow(self, rng):
        st = DecodeStage(D, 2, rng)
        out = st(Tensor(rng.normal(size=(2, D, 3, 5))), Tensor(rng.normal(size=(2, D, 6, 10))))
        assert out.shape == (2, D, 6, 10)

    @pytest.mark.parametrize("deep,shallow", [((4, 4), (4, 4)), ((4, 4), (12, 12)), ((4, 4), (8, 7))])
    def test_ratio_must_be_two(self, rng, deep, shallow):
        with pytest.raises(ShapeError):
            DecodeStage(D, 2, rng)(Tensor(np.zeros((1, D) + deep)), Tensor(np.zeros((1, D) + shallow)))

    def test_constant_inputs_constant_pre_attention(self, rng):
        st = DecodeStage(D, 2, rng)
        deep = Tensor(np.broadcast_to(rng.normal(size=(1, D, 1, 1)), (1, D, 3, 3)).copy())
        shallow = Tensor(np.broadcast_to(rng.normal(size=(1, D, 1, 1)), (1, D, 6, 6)).copy())
        pre = st.balance(concat_channels([F.upsample_bilinear(deep, 6, 6), shallow])).data
        np.testing.assert_allclose(pre, pre[:, :, :1, :1] * np.ones_like(pre), atol=1e-6)

    def test_composition_oracle(self, wide, rng):
        st = DecodeStage(D, 2, rng)
        deep, shallow = Tensor(rng.normal(size=(1, D, 2, 2))), Tensor(rng.normal(size=(1, D, 4, 4)))
        up = F.upsample_bilinear(deep, 4, 4)
        cat = concat_channels([up, shallow])
        bal = F.conv2d(cat, st.balance.weight, st.balance.bias)
        params = {k: getattr(st.attention, k) for k in ("w1", "b1", "w2", "b2")}
        want = channel_attention(bal, params)
        np.testing.assert_array_equal(decode_stage(deep, shallow, st).data, want.data)


class TestDecoder:
    def test_output_shape_and_range(self, rng):
        dec = Decoder(D, 2, rng)
        out = dec(pyramid(rng, 32, n=2))
        assert out.shape == (2, 1, 32, 32)
        assert out.data.min() >= 0 and out.data.max() <= 1

    def test_intermediate_resolutions(self, rng):
        s = Decoder(D, 2, rng).intermediates(pyramid(rng, 64))
        assert [t.shape[2:] for t in s] == [(8, 8), (16, 16), (32, 32)]

    def test_zero_params_half(self, rng):
        dec = Decoder(D, 2, rng)
        for p in dec.parameters():
            p.data[...] = 0.0
        np.testing.assert_array_equal(dec(pyramid(rng)).data, 0.5)

    def test_is_composition_of_three_stages(self, wide, rng):
        dec = Decoder(D, 2, rng)
        pyr = pyramid(rng, 32)
        s = decode_stage(pyr.sigma, pyr.gamma, dec.stages[0])
        s = decode_stage(s, pyr.beta, dec.stages[1])
        s = decode_stage(s, pyr.alpha, dec.stages[2])
        want = sigmoid(F.upsample_bilinear(dec.predict(s), 32, 32))
        np.testing.assert_array_equal(dec(pyr).data, want.data)

    def test_bounded_for_extreme_inputs(self, rng):
        dec = Decoder(D, 2, rng)
        pyr = FeaturePyramid(*(Tensor(t.data * 1e4) for t in pyramid(rng).streams()))
        out = dec(pyr).data
        assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1
