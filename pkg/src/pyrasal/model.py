"""Full saliency network: encoder, optional depth fusion, decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .decoder import Decoder
from .depth import DepthBranch, DepthFeatures, DepthSource
from .encoder import Encoder, EncoderConfig, FeaturePyramid
from .nn import Module
from .tensor import Tensor, no_grad


class AblationMode(str, Enum):
    RGB_ONLY = "rgb_only"
    M1_PROVIDED_DEPTH = "m1_provided_depth"
    M2_ESTIMATED_DEPTH = "m2_estimated_depth"
    M3_NO_PYRAMID = "m3_no_pyramid"

    @property
    def depth_source(self) -> DepthSource:
        return {
            AblationMode.M1_PROVIDED_DEPTH: DepthSource.PROVIDED,
            AblationMode.M2_ESTIMATED_DEPTH: DepthSource.ESTIMATED,
        }.get(self, DepthSource.NONE)

    @property
    def uses_pyramid(self) -> bool:
        return self is not AblationMode.M3_NO_PYRAMID


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    depth_channels: tuple[int, int, int, int] = (8, 16, 32, 32)
    depth_frozen: bool = False
    attention_reduction: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = {k: tuple(v) if isinstance(v, list) else v for k, v in d["encoder"].items()}
        rest = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k != "encoder"}
        return cls(encoder=EncoderConfig(**enc), **rest)


def component_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators so that toggling one component leaves the others' init unchanged."""
    names = ("encoder", "pyramid", "decoder", "depth")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


class SaliencyModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, mode: AblationMode | str = AblationMode.RGB_ONLY,
                 seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.mode = AblationMode(mode)
        rngs = component_rngs(seed)
        self.encoder = Encoder(cfg.encoder, rngs["encoder"], use_pyramid=self.mode.uses_pyramid,
                               pyramid_rng=rngs["pyramid"])
        self.decoder = Decoder(cfg.encoder.d_feat, cfg.attention_reduction, rngs["decoder"])
        if self.mode.depth_source is not DepthSource.NONE:
            self.depth = DepthBranch(cfg.encoder.d_feat, cfg.depth_channels, rngs["depth"],
                                     frozen=cfg.depth_frozen)
        else:
            self.depth = None
        self.last_depth: DepthFeatures | None = None

    def trainable_parameters(self):
        """Named parameters that receive updates in the active mode."""
        frozen = self.depth is not None and self.depth.frozen
        skip = ("depth.estimator.",) if frozen else ()
        if self.depth is not None:
            # the saliency objective reads only the trunk's feat; the decoder half is fitted by pretrain_depth
            skip += ("depth.estimator.up.", "depth.estimator.out.")
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(skip)]

    def depth_features(self, rgb: Tensor, depth: Tensor | None) -> DepthFeatures | None:
        source = self.mode.depth_source
        if source is DepthSource.NONE:
            return None
        if source is DepthSource.PROVIDED:
            if depth is None:
                raise ValueError("m1_provided_depth needs a depth map for every sample")
            return self.depth.featurize_provided_depth(depth)
        return self.depth.estimate_depth(rgb)

    def features(self, rgb: Tensor, depth: Tensor | None = None) -> FeaturePyramid:
        pyr = self.encoder(rgb)
        df = self.depth_features(rgb, depth)
        self.last_depth = df
        if df is None:
            return pyr
        return pyr.replace(sigma=self.depth.fuse_depth(pyr.sigma, df))

    def forward(self, rgb: Tensor, depth: Tensor | None = None) -> Tensor:
        return self.decoder(self.features(rgb, depth))

    def predict(self, rgb: np.ndarray, depth: np.ndarray | None = None) -> np.ndarray:
        """Inference in eval mode without recording a tape; returns ``[N, 1, H, W]``."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward(Tensor(rgb), None if depth is None else Tensor(depth))
        finally:
            self.train(was_training)
        return out.data
