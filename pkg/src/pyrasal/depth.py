"""Toy monocular depth estimator and depth-feature fusion into the deepest stream."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import functional as F
from .nn import Conv2d, ConvBNReLU, Module, ModuleList
from .tensor import ShapeError, Tensor, concat, concat_channels, no_grad, sigmoid


class DepthSource(str, Enum):
    NONE = "none"
    PROVIDED = "provided"
    ESTIMATED = "estimated"


@dataclass
class DepthFeatures:
    depth_map: Tensor  # [N, 1, H, W] in [0, 1]
    feat: Tensor  # [N, Cd, H/16, W/16]


class DepthEstimator(Module):
    """Four stride-2 encoder levels and a mirrored upsampling decoder with skips.

    ``feat`` is the deepest (1/16) encoder map; the depth map comes out of a sigmoid.
    """

    def __init__(self, channels: tuple[int, ...], rng: np.random.Generator):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("depth estimator needs exactly four encoder widths")
        self.channels = tuple(channels)
        ins = (3,) + self.channels[:-1]
        self.down = ModuleList(ConvBNReLU(i, o, 3, rng, stride=2) for i, o in zip(ins, self.channels))
        # decoder: 1/16 -> 1/8 -> 1/4 -> 1/2, each merging the encoder map of that level
        ups = []
        prev = self.channels[3]
        for skip in reversed(self.channels[:3]):
            ups.append(ConvBNReLU(prev + skip, skip, 3, rng))
            prev = skip
        self.up = ModuleList(ups)
        self.out = Conv2d(self.channels[0], 1, 3, rng)

    @property
    def feat_channels(self) -> int:
        return self.channels[-1]

    def encode(self, x: Tensor) -> list[Tensor]:
        levels = []
        for layer in self.down:
            x = layer(x)
            levels.append(x)
        return levels

    def forward(self, rgb: Tensor) -> DepthFeatures:
        _, _, h, w = rgb.shape
        levels = self.encode(rgb)
        y = levels[3]
        for layer, skip in zip(self.up, reversed(levels[:3])):
            y = F.upsample_bilinear(y, skip.shape[2], skip.shape[3])
            y = layer(concat_channels([y, skip]))
        depth = sigmoid(F.upsample_bilinear(self.out(y), h, w))
        return DepthFeatures(depth, levels[3])


class DepthBranch(Module):
    def __init__(self, d_feat: int, channels: tuple[int, ...], rng: np.random.Generator, frozen: bool = False):
        super().__init__()
        self.estimator = DepthEstimator(channels, rng)
        self.balance = Conv2d(d_feat + self.estimator.feat_channels, d_feat, 1, rng)
        self.frozen = frozen

    def estimate_depth(self, rgb: Tensor) -> DepthFeatures:
        if self.frozen:
            with no_grad():
                return self.estimator(rgb)
        return self.estimator(rgb)

    def featurize_provided_depth(self, depth: Tensor) -> DepthFeatures:
        if depth.ndim != 4 or depth.shape[1] != 1:
            raise ShapeError(f"depth must be [N, 1, H, W], got {depth.shape}")
        if depth.data.min() < 0 or depth.data.max() > 1 or not np.isfinite(depth.data).all():
            raise ValueError("provided depth must lie in [0, 1]")
        rgb_like = concat([depth, depth, depth], axis=1)
        if self.frozen:
            with no_grad():
                feat = self.estimator.encode(rgb_like)[3]
        else:
            feat = self.estimator.encode(rgb_like)[3]
        return DepthFeatures(depth, feat)

    def fuse_depth(self, f_sigma: Tensor, df: DepthFeatures | None) -> Tensor:
        return fuse_depth(f_sigma, df, self.balance)


def fuse_depth(f_sigma: Tensor, df: DepthFeatures | None, balance: Conv2d | None) -> Tensor:
    """Concatenate depth features onto ``f_sigma`` and mix back to its channel count.

    ``df=None`` is the RGB-only bypass and returns ``f_sigma`` itself.
    """
    if df is None:
        return f_sigma
    if df.feat.shape[2:] != f_sigma.shape[2:]:
        raise ShapeError(f"depth features {df.feat.shape[2:]} vs f_sigma {f_sigma.shape[2:]}", dim="HW")
    return balance(concat_channels([f_sigma, df.feat]))
