"""Flat ``key = value`` run configuration covering every tunable of the pipeline.

Lines starting with ``#`` and blank lines are ignored. Tuples are written
comma-separated (``daspp_rates = 1,2,4``); optional values accept ``none``.
Unknown keys and unparsable values raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .losses import LossConfig, LossWeights, SSIMConfig, StructureLossConfig
from .model import AblationMode, ModelConfig
from .train import OptimConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    # run
    mode: str = "rgb_only"
    seed: int = 0
    manifest: str = ""
    out_dir: str = "runs/default"
    # encoder
    input_h: int = 64
    input_w: int = 64
    patch_size: int = 16
    stem_channels: tuple[int, ...] = (16, 32)
    cnn_block_taps: tuple[int, ...] = (1, 2)
    transformer_depth: int = 4
    transformer_stage_taps: tuple[int, ...] = (3, 4)
    token_dim: int = 128
    transformer_heads: int = 4
    d_feat: int = 256
    pyramid_heads: int = 4
    daspp_branch_channels: int = 32
    daspp_rates: tuple[int, ...] = (1, 2, 4)
    # depth branch and decoder
    depth_channels: tuple[int, ...] = (8, 16, 32, 32)
    depth_frozen: bool = False
    depth_pretrain_steps: int = 0
    attention_reduction: int = 4
    # loss
    eps_st: float = 0.2
    eps_ssim: float = 0.3
    eps_l2: float = 0.2
    eps_se: float = 0.3
    psi: float = 5.0
    st_window: int = 7
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    ssim_range: float = 1.0
    ssim_window: int = 7
    l2_mode: str = "mse"
    # optimiser
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 25
    batch: int = 6
    lr_decay: float = 0.9
    clip_norm: float | None = None
    max_steps: int | None = None
    checkpoint_every: int = 1
    keep_checkpoints: int | None = None
    # evaluation
    f_beta2: float = 0.3
    f_reduce: str = "max"

    # -- parsing -------------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(line, f"line {lineno} is not of the form key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
        return cls.from_text(text)

    def set(self, key: str, value: str) -> None:
        hints = typing.get_type_hints(type(self))
        if key not in hints:
            raise ConfigError(key, "unknown key")
        setattr(self, key, _convert(key, value, hints[key]))

    def validate(self) -> None:
        try:
            self.train_config()
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(_guess_key(str(e)), str(e)) from None
        if self.f_reduce not in ("max", "mean"):
            raise ConfigError("f_reduce", "must be max or mean")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    # -- mapping onto module configs --------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.input_h, self.input_w, self.patch_size, tuple(self.stem_channels),
                             tuple(self.cnn_block_taps), self.transformer_depth,
                             tuple(self.transformer_stage_taps), self.token_dim, self.transformer_heads,
                             self.d_feat, self.pyramid_heads, self.daspp_branch_channels,
                             tuple(self.daspp_rates))

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.encoder_config(), tuple(self.depth_channels), self.depth_frozen,
                           self.attention_reduction)

    def loss_config(self) -> LossConfig:
        return LossConfig(LossWeights(self.eps_st, self.eps_ssim, self.eps_l2, self.eps_se),
                          StructureLossConfig(self.psi, self.st_window),
                          SSIMConfig(self.ssim_k1, self.ssim_k2, self.ssim_range, self.ssim_window),
                          self.l2_mode)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(self.lr, self.beta1, self.beta2, self.adam_eps, self.epochs, self.batch,
                           self.lr_decay, self.clip_norm, self.max_steps)

    def train_config(self) -> TrainConfig:
        try:
            mode = AblationMode(self.mode)
        except ValueError:
            raise ConfigError("mode", f"unknown mode {self.mode!r}; one of "
                                      f"{', '.join(m.value for m in AblationMode)}") from None
        return TrainConfig(self.model_config(), self.optim_config(), self.loss_config(), mode, self.seed,
                           self.checkpoint_every, self.keep_checkpoints, self.depth_pretrain_steps)


def _convert(key: str, value: str, hint):
    optional = False
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        optional, hint = True, args[0]
    if optional and value.lower() == "none":
        return None
    try:
        if hint is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typing.get_origin(hint) is tuple:
            return tuple(int(v) for v in value.split(",") if v.strip())
        return hint(value)
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r} as {getattr(hint, '__name__', hint)}") from None


_KEY_HINTS = {
    "input dims": "input_h", "patch_size": "patch_size", "cnn_block_taps": "cnn_block_taps",
    "stage taps": "transformer_stage_taps", "head counts": "token_dim", "dilation rates": "daspp_rates",
    "loss weights": "eps_st", "SSIM window": "ssim_window", "window": "st_window", "psi": "psi", "c1 and c2": "ssim_k1",
    "l2_mode": "l2_mode", "lr must": "lr", "betas": "beta1", "epochs": "epochs", "lr_decay": "lr_decay",
    "reduction_ratio": "attention_reduction", "four encoder widths": "depth_channels",
}


def _guess_key(message: str) -> str:
    for fragment, key in _KEY_HINTS.items():
        if fragment in message:
            return key
    return "<config>"
