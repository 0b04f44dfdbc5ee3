from .blocks import (
    DASPP,
    MHSA,
    BatchNorm2d,
    ChannelAttention,
    ChannelAttentionConfig,
    Conv2d,
    ConvBNReLU,
    DASPPConfig,
    LayerNorm,
    Linear,
    MHSAConfig,
    SpatialMHSA,
    TransformerBlock,
    channel_attention,
    mhsa,
    rates_for_size,
)
from .module import Module, ModuleList, Parameter

__all__ = [
    "DASPP", "MHSA", "BatchNorm2d", "ChannelAttention", "ChannelAttentionConfig", "Conv2d",
    "ConvBNReLU", "DASPPConfig", "LayerNorm", "Linear", "MHSAConfig", "SpatialMHSA",
    "TransformerBlock", "channel_attention", "mhsa", "rates_for_size", "Module", "ModuleList",
    "Parameter",
]
