"""Reusable layers: convolutions, normalisation, attention, DASPP, channel attention."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import functional as F
from ..tensor import ShapeError, Tensor, concat_channels, default_dtype, relu, sigmoid, softmax, gelu
from .module import Module, ModuleList, Parameter, he_normal, uniform_fan_in


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, dilation: int = 1, bias: bool = True, init_gain: float = 1.0):
        super().__init__()
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        self.weight = Parameter(init_gain * he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k))
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=default_dtype()))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_mean", np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, k, rng, stride=stride)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(uniform_fan_in(rng, (in_dim, out_dim), in_dim))
        self.bias = Parameter(np.zeros(out_dim, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = Parameter(np.ones(dim, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(dim, dtype=default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.gamma, self.beta)


# -- multi-head self-attention ------------------------------------------------
@dataclass(frozen=True)
class MHSAConfig:
    token_dim: int
    num_heads: int = 4

    def __post_init__(self):
        if self.token_dim % self.num_heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.num_heads


def mhsa(tokens: Tensor, cfg: MHSAConfig, params: dict, return_attention: bool = False):
    """Multi-head scaled dot-product self-attention.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo``; weights are ``[D, D]``
    applied as ``x @ w``. No positional terms are added here.
    """
    if tokens.ndim != 3:
        raise ShapeError(f"mhsa expects [N, T, D], got {tokens.shape}")
    n, t, d = tokens.shape
    if d != cfg.token_dim:
        raise ShapeError(f"mhsa: token dim {d} != configured {cfg.token_dim}", dim="D")
    h, hd = cfg.num_heads, cfg.head_dim

    def heads(w, b):
        return F.linear(tokens, params[w], params[b]).reshape(n, t, h, hd).transpose(0, 2, 1, 3)

    q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    attn = softmax(scores, axis=-1)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    out = F.linear(mixed, params["wo"], params["bo"])
    return (out, attn) if return_attention else out


class MHSA(Module):
    def __init__(self, cfg: MHSAConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.token_dim
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", Parameter(uniform_fan_in(rng, (d, d), d)))
            setattr(self, f"b{name}", Parameter(np.zeros(d, dtype=default_dtype())))
        self.calls = 0

    def params(self) -> dict:
        return dict(self._params)

    def forward(self, tokens: Tensor, return_attention: bool = False):
        self.calls += 1
        return mhsa(tokens, self.cfg, self.params(), return_attention)


class SpatialMHSA(MHSA):
    """MHSA over the spatial locations of an NCHW map, one token per pixel."""

    def forward(self, x: Tensor, return_attention: bool = False):
        _, _, h, w = x.shape
        out = super().forward(F.flatten_tokens(x), return_attention)
        if return_attention:
            return F.unflatten_tokens(out[0], h, w), out[1]
        return F.unflatten_tokens(out, h, w)


class TransformerBlock(Module):
    """Pre-norm block: ``x + MHSA(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        super().__init__()
        self.ln1 = LayerNorm(dim)
        self.attn = MHSA(MHSAConfig(dim, num_heads), rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(gelu(self.fc1(self.ln2(x))))


# -- dense atrous spatial pyramid pooling ------------------------------------
@dataclass(frozen=True)
class DASPPConfig:
    in_channels: int
    branch_channels: int = 32
    dilation_rates: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        rates = tuple(self.dilation_rates)
        if not rates:
            raise ValueError("DASPP needs at least one dilation rate")
        if any(b <= a for a, b in zip(rates, rates[1:])) or rates[0] < 1:
            raise ValueError(f"dilation rates must be positive and strictly increasing: {rates}")

    def branch_in_channels(self, i: int) -> int:
        return self.in_channels + i * self.branch_channels


def rates_for_size(rates: Sequence[int], size: int) -> tuple[int, ...]:
    """Keep the rates whose off-centre taps still land inside a ``size``-wide map."""
    kept = tuple(r for r in rates if r < size)
    return kept or (1,)


class DASPP(Module):
    """Densely connected atrous branches followed by a 1x1 projection back to C channels.

    Branch ``i`` sees ``concat(x, b_0, ..., b_{i-1})``, squeezes it with a 1x1 conv to
    ``branch_channels`` and applies a dilated 3x3 conv (padding = rate, so the
    resolution is preserved). The projection reads the concatenated branch outputs.
    """

    def __init__(self, cfg: DASPPConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        b = cfg.branch_channels
        self.reduce = ModuleList(Conv2d(cfg.branch_in_channels(i), b, 1, rng)
                                 for i in range(len(cfg.dilation_rates)))
        self.atrous = ModuleList(Conv2d(b, b, 3, rng, dilation=r) for r in cfg.dilation_rates)
        self.project = Conv2d(b * len(cfg.dilation_rates), cfg.in_channels, 1, rng)
        self.calls = 0

    def forward(self, x: Tensor) -> Tensor:
        self.calls += 1
        _, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ShapeError(f"DASPP: {c} input channels, configured for {self.cfg.in_channels}", dim="C")
        largest = self.cfg.dilation_rates[-1]
        if h <= largest or w <= largest:
            raise ShapeError(f"DASPP: {h}x{w} map too small for dilation {largest}",
                             dim="H" if h <= largest else "W")
        feats = [x]
        outs = []
        for reduce, atrous in zip(self.reduce, self.atrous):
            inp = feats[0] if len(feats) == 1 else concat_channels(feats)
            y = relu(atrous(relu(reduce(inp))))
            feats.append(y)
            outs.append(y)
        merged = outs[0] if len(outs) == 1 else concat_channels(outs)
        return self.project(merged)


# -- residual channel attention ---------------------------------------------
@dataclass(frozen=True)
class ChannelAttentionConfig:
    channels: int
    reduction_ratio: int = 4

    def __post_init__(self):
        if self.reduction_ratio < 1 or self.channels // self.reduction_ratio < 1:
            raise ValueError("channels / reduction_ratio must be >= 1")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction_ratio


def channel_attention(x: Tensor, params: dict, return_weights: bool = False):
    """``x + x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)`` with weights applied as ``v @ W``."""
    pooled = F.global_avg_pool(x)
    hidden = relu(F.linear(pooled, params["w1"], params["b1"]))
    a = sigmoid(F.linear(hidden, params["w2"], params["b2"]))
    out = x + F.channel_scale(x, a)
    return (out, a) if return_weights else out


class ChannelAttention(Module):
    def __init__(self, cfg: ChannelAttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.w1 = Parameter(uniform_fan_in(rng, (cfg.channels, cfg.hidden), cfg.channels))
        self.b1 = Parameter(np.zeros(cfg.hidden, dtype=default_dtype()))
        self.w2 = Parameter(uniform_fan_in(rng, (cfg.hidden, cfg.channels), cfg.hidden))
        self.b2 = Parameter(np.zeros(cfg.channels, dtype=default_dtype()))

    def forward(self, x: Tensor, return_weights: bool = False):
        if x.shape[1] != self.cfg.channels:
            raise ShapeError(f"channel attention: {x.shape[1]} channels, expected {self.cfg.channels}", dim="C")
        return channel_attention(x, dict(self._params), return_weights)
