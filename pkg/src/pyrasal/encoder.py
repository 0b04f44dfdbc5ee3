"""Four-stream CNN/transformer encoder with trans-heads and the pyramidal attention block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import (
    DASPP,
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    DASPPConfig,
    Linear,
    MHSAConfig,
    Module,
    ModuleList,
    SpatialMHSA,
    TransformerBlock,
    rates_for_size,
)
from .tensor import ShapeError, Tensor, concat, relu

STREAMS = ("alpha", "beta", "gamma", "sigma")
# (number of DASPP modules, has MHSA) per stream, shallow to deep
PYRAMID_LAYOUT = {"alpha": (3, True), "beta": (2, True), "gamma": (1, True), "sigma": (1, False)}


@dataclass(frozen=True)
class EncoderConfig:
    input_h: int = 64
    input_w: int = 64
    patch_size: int = 16
    stem_channels: tuple[int, int] = (16, 32)
    cnn_block_taps: tuple[int, int] = (1, 2)
    transformer_depth: int = 4
    transformer_stage_taps: tuple[int, int] = (3, 4)
    token_dim: int = 128
    transformer_heads: int = 4
    d_feat: int = 256
    pyramid_heads: int = 4
    daspp_branch_channels: int = 32
    daspp_rates: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if self.input_h % 16 or self.input_w % 16:
            raise ValueError(f"input dims {self.input_h}x{self.input_w} must be divisible by 16")
        if self.patch_size != 16:
            raise ValueError("patch_size must be 16 input pixels so the token grid sits at 1/16 resolution")
        bi, bj = self.cnn_block_taps
        if not bi < bj:
            raise ValueError("cnn_block_taps must satisfy b_i < b_j")
        si, sj = self.transformer_stage_taps
        if not 1 <= si < sj <= self.transformer_depth:
            raise ValueError(f"stage taps must satisfy 1 <= s_i < s_j <= L, got {si}, {sj}, L={self.transformer_depth}")
        if self.token_dim % self.transformer_heads or self.d_feat % self.pyramid_heads:
            raise ValueError("token_dim / d_feat must be divisible by their head counts")

    @property
    def grid(self) -> tuple[int, int]:
        return self.input_h // self.patch_size, self.input_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return (self.input_h * self.input_w) // self.patch_size ** 2

    def stream_size(self, n: int) -> tuple[int, int]:
        """Spatial dims of stream ``n`` (1..4 for alpha..sigma)."""
        return self.input_h // 2 ** n, self.input_w // 2 ** n


@dataclass
class FeaturePyramid:
    alpha: Tensor
    beta: Tensor
    gamma: Tensor
    sigma: Tensor

    def streams(self) -> list[Tensor]:
        return [self.alpha, self.beta, self.gamma, self.sigma]

    def replace(self, **kw) -> "FeaturePyramid":
        d = dict(alpha=self.alpha, beta=self.beta, gamma=self.gamma, sigma=self.sigma)
        d.update(kw)
        return FeaturePyramid(**d)


def check_resolution(pyr: FeaturePyramid, h: int, w: int, channels: int | None = None) -> None:
    for n, (name, t) in enumerate(zip(STREAMS, pyr.streams()), start=1):
        want = (h // 2 ** n, w // 2 ** n)
        if t.shape[2:] != want:
            raise ShapeError(f"stream {name}: spatial {t.shape[2:]} != {want}", dim=name)
        if channels is not None and t.shape[1] != channels:
            raise ShapeError(f"stream {name}: {t.shape[1]} channels != {channels}", dim=name)


# -- CNN stem -----------------------------------------------------------------
class ResidualBlock(Module):
    """Stride-2 basic block with a 1x1 projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=2, bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(out_ch)
        self.shortcut = Conv2d(in_ch, out_ch, 1, rng, stride=2)

    @staticmethod
    def param_count(in_ch: int, out_ch: int) -> int:
        return 10 * in_ch * out_ch + 9 * out_ch * out_ch + 5 * out_ch

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return relu(y + self.shortcut(x))


class CNNStem(Module):
    """Two residual blocks giving the 1/2 and 1/4 resolution streams."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        c1, c2 = cfg.stem_channels
        self.block_i = ResidualBlock(3, c1, rng)
        self.block_j = ResidualBlock(c1, c2, rng)

    @staticmethod
    def param_count(cfg: EncoderConfig) -> int:
        c1, c2 = cfg.stem_channels
        return ResidualBlock.param_count(3, c1) + ResidualBlock.param_count(c1, c2)

    def forward(self, rgb: Tensor) -> tuple[Tensor, Tensor]:
        _, c, h, w = rgb.shape
        if c != 3:
            raise ShapeError(f"expected 3 input channels, got {c}", dim="C")
        if h % 16 or w % 16:
            raise ShapeError(f"input {h}x{w} not divisible by 16", dim="H" if h % 16 else "W")
        f_alpha = self.block_i(rgb)
        f_beta = self.block_j(f_alpha)
        return f_alpha, f_beta


# -- transformer stages -----------------------------------------------------
def embed(feats: list[Tensor], grid: tuple[int, int]) -> Tensor:
    """Average-pool every map onto the token grid, concatenate channels, flatten to tokens."""
    gh, _ = grid
    pooled = [F.avg_pool2d(f, f.shape[2] // gh) for f in feats]
    cat = pooled[0] if len(pooled) == 1 else concat(pooled, axis=1)
    return F.flatten_tokens(cat)


class TransformerStages(Module):
    """Transformer trunk tapped at two stages.

    Stage ``s_i`` consumes ``embed(f_alpha, f_beta)``; the trunk is then re-fed
    ``embed(f_alpha, f_beta, f_gamma)`` and run up to ``s_j``. Blocks past ``s_j``
    would never influence an output, so only ``s_j`` blocks are built.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.stem_channels
        si, sj = cfg.transformer_stage_taps
        self.proj_gamma = Linear(c1 + c2, cfg.token_dim, rng)
        self.proj_sigma = Linear(c1 + c2 + cfg.token_dim, cfg.token_dim, rng)
        self.blocks = ModuleList(TransformerBlock(cfg.token_dim, cfg.transformer_heads, rng) for _ in range(sj))

    def run_tokens(self, f_alpha: Tensor, f_beta: Tensor) -> tuple[Tensor, Tensor]:
        si, sj = self.cfg.transformer_stage_taps
        if sj > len(self.blocks):
            raise ValueError(f"tap {sj} exceeds transformer depth {len(self.blocks)}")
        grid = (f_alpha.shape[2] // 8, f_alpha.shape[3] // 8)
        t = self.proj_gamma(embed([f_alpha, f_beta], grid))
        for blk in self.blocks[:si]:
            t = blk(t)
        t_gamma = t
        gamma_grid = F.unflatten_tokens(t_gamma, *grid)
        t = self.proj_sigma(embed([f_alpha, f_beta, gamma_grid], grid))
        for blk in self.blocks[si:sj]:
            t = blk(t)
        return t_gamma, t

    def forward(self, f_alpha: Tensor, f_beta: Tensor) -> tuple[Tensor, Tensor]:
        gh, gw = f_alpha.shape[2] // 8, f_alpha.shape[3] // 8
        t_gamma, t_sigma = self.run_tokens(f_alpha, f_beta)
        f_gamma = F.upsample_bilinear(F.unflatten_tokens(t_gamma, gh, gw), 2 * gh, 2 * gw)
        f_sigma = F.unflatten_tokens(t_sigma, gh, gw)
        return f_gamma, f_sigma


class TransHead(Module):
    """Three conv + BN + ReLU layers mapping any channel count to ``d_feat``."""

    def __init__(self, in_ch: int, d_feat: int, rng: np.random.Generator):
        super().__init__()
        self.layers = ModuleList([
            ConvBNReLU(in_ch, d_feat, 3, rng),
            ConvBNReLU(d_feat, d_feat, 1, rng),
            ConvBNReLU(d_feat, d_feat, 1, rng),
        ])

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


# -- pyramidal attention ------------------------------------------------------
class PyramidStream(Module):
    def __init__(self, n_daspp: int, with_mhsa: bool, d_feat: int, heads: int, rates, branch_channels: int,
                 rng: np.random.Generator):
        super().__init__()
        cfg = DASPPConfig(d_feat, branch_channels, tuple(rates))
        self.daspp = ModuleList(DASPP(cfg, rng) for _ in range(n_daspp))
        self.mhsa = SpatialMHSA(MHSAConfig(d_feat, heads), rng) if with_mhsa else None

    def forward(self, x: Tensor) -> Tensor:
        y = x
        for block in self.daspp:
            y = block(y)
        if self.mhsa is not None:
            y = self.mhsa(y)
        return x + y


class PyramidAttention(Module):
    """DASPP/MHSA refinement per stream with an additive skip around each stream path.

    With ``pass_through=True`` no modules are built and streams are returned as-is.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, pass_through: bool = False):
        super().__init__()
        self.pass_through = pass_through
        if pass_through:
            return
        for n, name in enumerate(STREAMS, start=1):
            n_daspp, with_mhsa = PYRAMID_LAYOUT[name]
            size = min(cfg.stream_size(n))
            setattr(self, name, PyramidStream(n_daspp, with_mhsa, cfg.d_feat, cfg.pyramid_heads,
                                              rates_for_size(cfg.daspp_rates, size),
                                              cfg.daspp_branch_channels, rng))

    def call_counts(self) -> dict[str, tuple[int, int]]:
        counts = {}
        for name in STREAMS:
            stream = getattr(self, name, None)
            if stream is None:
                counts[name] = (0, 0)
                continue
            counts[name] = (sum(d.calls for d in stream.daspp),
                            stream.mhsa.calls if stream.mhsa is not None else 0)
        return counts

    def reset_counts(self) -> None:
        for _, m in self.named_modules():
            if hasattr(m, "calls"):
                m.calls = 0

    def forward(self, pyr: FeaturePyramid) -> FeaturePyramid:
        if self.pass_through:
            return pyr
        return FeaturePyramid(*(getattr(self, name)(t) for name, t in zip(STREAMS, pyr.streams())))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, use_pyramid: bool = True,
                 pyramid_rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.stem_channels
        self.stem = CNNStem(cfg, rng)
        self.transformer = TransformerStages(cfg, rng)
        self.head_alpha = TransHead(c1, cfg.d_feat, rng)
        self.head_beta = TransHead(c2, cfg.d_feat, rng)
        self.head_gamma = TransHead(cfg.token_dim, cfg.d_feat, rng)
        self.head_sigma = TransHead(cfg.token_dim, cfg.d_feat, rng)
        self.pyramid = PyramidAttention(cfg, pyramid_rng or rng, pass_through=not use_pyramid)

    def raw_features(self, rgb: Tensor) -> FeaturePyramid:
        f_alpha, f_beta = self.stem(rgb)
        f_gamma, f_sigma = self.transformer(f_alpha, f_beta)
        pyr = FeaturePyramid(f_alpha, f_beta, f_gamma, f_sigma)
        check_resolution(pyr, rgb.shape[2], rgb.shape[3])
        return pyr

    def headed(self, raw: FeaturePyramid) -> FeaturePyramid:
        return FeaturePyramid(self.head_alpha(raw.alpha), self.head_beta(raw.beta),
                              self.head_gamma(raw.gamma), self.head_sigma(raw.sigma))

    def forward(self, rgb: Tensor) -> FeaturePyramid:
        pyr = self.headed(self.raw_features(rgb))
        check_resolution(pyr, rgb.shape[2], rgb.shape[3], self.cfg.d_feat)
        out = self.pyramid(pyr)
        check_resolution(out, rgb.shape[2], rgb.shape[3], self.cfg.d_feat)
        return out
