"""Deep-to-shallow fusion decoder with residual channel attention."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .encoder import FeaturePyramid
from .nn import ChannelAttention, ChannelAttentionConfig, Conv2d, Module, ModuleList
from .tensor import ShapeError, Tensor, concat_channels, sigmoid


class DecodeStage(Module):
    """Upsample the deeper map 2x, concatenate with the shallower one, balance channels, attend."""

    def __init__(self, d_feat: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        self.balance = Conv2d(2 * d_feat, d_feat, 1, rng)
        self.attention = ChannelAttention(ChannelAttentionConfig(d_feat, reduction), rng)

    def forward(self, deep: Tensor, shallow: Tensor) -> Tensor:
        return decode_stage(deep, shallow, self)


def decode_stage(deep: Tensor, shallow: Tensor, stage: DecodeStage) -> Tensor:
    dh, dw = deep.shape[2:]
    sh, sw = shallow.shape[2:]
    if (sh, sw) != (2 * dh, 2 * dw):
        raise ShapeError(f"decode_stage: shallow {sh}x{sw} is not twice deep {dh}x{dw}", dim="HW")
    up = F.upsample_bilinear(deep, sh, sw)
    return stage.attention(stage.balance(concat_channels([up, shallow])))


class Decoder(Module):
    def __init__(self, d_feat: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        self.stages = ModuleList(DecodeStage(d_feat, reduction, rng) for _ in range(3))
        # small head init keeps the initial sigmoid away from saturation
        self.predict = Conv2d(d_feat, 1, 1, rng, init_gain=0.1)

    def intermediates(self, pyr: FeaturePyramid) -> list[Tensor]:
        s = pyr.sigma
        out = []
        for stage, shallow in zip(self.stages, (pyr.gamma, pyr.beta, pyr.alpha)):
            s = stage(s, shallow)
            out.append(s)
        return out

    def head(self, s: Tensor, h: int, w: int) -> Tensor:
        return sigmoid(F.upsample_bilinear(self.predict(s), h, w))

    def forward(self, pyr: FeaturePyramid) -> Tensor:
        s = self.intermediates(pyr)[-1]
        _, _, h2, w2 = pyr.alpha.shape
        return self.head(s, 2 * h2, 2 * w2)
