"""Adam training loop with per-epoch decay, JSON-lines step logs and resumable checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .dataset import Manifest, Sample, resize_sample
from .depth import DepthSource
from .losses import LossConfig, LossReport, LossWeights, SSIMConfig, StructureLossConfig, total_loss
from .model import AblationMode, ModelConfig, SaliencyModel
from .nn import Parameter
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 25
    batch: int = 6
    lr_decay: float = 0.9
    clip_norm: float | None = None  # global gradient-norm clip; None disables
    max_steps: int | None = None  # stop early once this many steps are done

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.lr_decay <= 0:
            raise ValueError("lr_decay must be positive")


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str, last_checkpoint: Path | None):
        super().__init__(f"training diverged at step {step}: {reason}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_schedule(epoch: int, cfg: OptimConfig = OptimConfig()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.lr_decay ** epoch


def adam_step(params: Sequence[tuple[str, Parameter]], state: AdamState, lr: float,
              cfg: OptimConfig = OptimConfig()) -> None:
    """Bias-corrected Adam update in place. A parameter without a gradient is treated as zero-gradient.

    All gradients are checked before anything is modified, so an aborted step leaves no trace.
    """
    grads = []
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteGradient(name)
        grads.append(g)
    if cfg.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        if norm > cfg.clip_norm:
            grads = [g * (cfg.clip_norm / norm) for g in grads]
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for (name, p), g in zip(params, grads):
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)


# -- training -------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mode: AblationMode = AblationMode.RGB_ONLY
    seed: int = 0
    checkpoint_every: int = 1  # epochs
    keep_checkpoints: int | None = None  # None keeps all
    depth_pretrain_steps: int = 0  # depth-only fitting before the main loop (estimated-depth mode)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "optim": asdict(self.optim),
            "loss": asdict(self.loss),
            "mode": self.mode.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "TrainConfig":
        loss = d["loss"]
        lc = LossConfig(LossWeights(**loss["weights"]), StructureLossConfig(**loss["structure"]),
                        SSIMConfig(**loss["ssim"]), loss["l2_mode"])
        return cls(ModelConfig.from_dict(d["model"]), OptimConfig(**d["optim"]), lc,
                   AblationMode(d["mode"]), d["seed"], **overrides)


@dataclass
class Batch:
    rgb: np.ndarray
    gt: np.ndarray
    depth: np.ndarray | None


@dataclass
class TrainResult:
    model: SaliencyModel
    state: AdamState
    epoch: int
    step: int
    history: list[dict]
    checkpoints: list[Path]


def stack_samples(samples: Sequence[Sample], size: tuple[int, int], need_depth: bool) -> Batch:
    resized = [resize_sample(s, size) for s in samples]
    if need_depth and any(s.depth is None for s in resized):
        raise ValueError("this mode needs a depth map for every sample")
    rgb = np.stack([s.rgb for s in resized])
    gt = np.stack([s.gt for s in resized])
    depth = np.stack([s.depth for s in resized]) if need_depth else None
    return Batch(rgb, gt, depth)


def shuffle_rng(seed: int) -> np.random.Generator:
    # kept apart from the parameter-init streams spawned in model.component_rngs
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5A5A]))


def make_checkpoint(model: SaliencyModel, state: AdamState, cfg: TrainConfig, epoch: int,
                    rng: np.random.Generator) -> Checkpoint:
    return Checkpoint(
        config=cfg.to_dict(), epoch=epoch, step=state.step, rng_state=rng.bit_generator.state,
        params={n: p.data.copy() for n, p in model.named_parameters()},
        buffers={n: b.copy() for n, b in model.named_buffers()},
        adam_m={n: a.copy() for n, a in state.m.items()},
        adam_v={n: a.copy() for n, a in state.v.items()},
    )


def restore(ckpt: Checkpoint, model: SaliencyModel) -> tuple[AdamState, np.random.Generator]:
    """Load parameters, buffers and optimiser state; raise CheckpointError on any mismatch."""
    state = {**ckpt.params, **ckpt.buffers}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint does not fit the model: {e}") from None
    own = dict(model.named_parameters())
    for name, arr in ckpt.adam_m.items():
        if name not in own or arr.shape != own[name].shape or ckpt.adam_v.get(name) is None:
            raise CheckpointError(f"optimiser moment {name!r} does not fit the model")
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    adam = AdamState(ckpt.step, {k: v.copy() for k, v in ckpt.adam_m.items()},
                     {k: v.copy() for k, v in ckpt.adam_v.items()})
    return adam, rng


def compute_loss(model: SaliencyModel, batch: Batch, idx: np.ndarray, cfg: TrainConfig) -> LossReport:
    rgb = batch.rgb[idx]
    depth = Tensor(batch.depth[idx]) if batch.depth is not None else None
    y = model(Tensor(rgb), depth)
    params = [p for _, p in model.trainable_parameters()] if cfg.loss.l2_mode == "param_norm" else None
    return total_loss(y, batch.gt[idx], rgb, cfg.loss, params)


def epoch_batches(rng: np.random.Generator, n: int, batch: int) -> list[np.ndarray]:
    """Seeded permutation split into batches of ``min(batch, n)``; the last one may be short."""
    b = min(batch, n)
    perm = rng.permutation(n)
    return [perm[i:i + b] for i in range(0, n, b)]


def train(data: Manifest | Sequence[Sample], cfg: TrainConfig = TrainConfig(), out_dir=None,
          resume: Checkpoint | str | Path | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimise a fresh (or resumed) model on ``data``.

    Writes ``steps.jsonl`` and ``ckpt_epochNNN.pasn`` files under ``out_dir`` when given.
    Raises TrainingDiverged on a non-finite loss or gradient; checkpoints already
    written are left in place.
    """
    samples = data.load_all() if isinstance(data, Manifest) else list(data)
    if not samples:
        raise ValueError("training set is empty")
    enc = cfg.model.encoder
    batch = stack_samples(samples, (enc.input_h, enc.input_w),
                          need_depth=cfg.mode.depth_source is DepthSource.PROVIDED)
    model = SaliencyModel(cfg.model, cfg.mode, seed=cfg.seed)
    model.train()
    start_epoch = 0
    if resume is not None:
        ckpt = load_checkpoint(resume) if isinstance(resume, (str, Path)) else resume
        if ckpt.config.get("mode") != cfg.mode.value:
            raise CheckpointError(f"checkpoint mode {ckpt.config.get('mode')!r} != run mode {cfg.mode.value!r}")
        state, rng = restore(ckpt, model)
        start_epoch = ckpt.epoch
    else:
        state, rng = AdamState(), shuffle_rng(cfg.seed)
        if cfg.depth_pretrain_steps and cfg.mode.depth_source is DepthSource.ESTIMATED:
            pretrain_depth(model, samples, cfg.depth_pretrain_steps, seed=cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "steps.jsonl", "a" if resume is not None else "w")
    params = model.trainable_parameters()
    history, written = [], []
    last_good = None
    epoch = start_epoch
    try:
        for epoch in range(start_epoch, cfg.optim.epochs):
            if cfg.optim.max_steps is not None and state.step >= cfg.optim.max_steps:
                break
            lr = lr_schedule(epoch, cfg.optim)
            for idx in epoch_batches(rng, len(samples), cfg.optim.batch):
                if cfg.optim.max_steps is not None and state.step >= cfg.optim.max_steps:
                    break
                model.zero_grad()
                report = compute_loss(model, batch, idx, cfg)
                if not np.isfinite(report.total):
                    raise TrainingDiverged(state.step + 1, f"loss is {report.total}", last_good)
                report.objective.backward()
                try:
                    adam_step(params, state, lr, cfg.optim)
                except NonFiniteGradient as e:
                    raise TrainingDiverged(state.step + 1, str(e), last_good) from None
                record = {"step": state.step, "epoch": epoch, "lr": lr, **report.as_dict()}
                history.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if on_step is not None:
                    on_step(record)
            done = epoch + 1
            finished = done == cfg.optim.epochs or (
                cfg.optim.max_steps is not None and state.step >= cfg.optim.max_steps)
            if out is not None and (done % cfg.checkpoint_every == 0 or finished):
                path = out / f"ckpt_epoch{done:03d}.pasn"
                save_checkpoint(path, make_checkpoint(model, state, cfg, done, rng))
                written.append(path)
                last_good = path
                if cfg.keep_checkpoints is not None:
                    while len(written) > cfg.keep_checkpoints:
                        written.pop(0).unlink(missing_ok=True)
            epoch = done
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, state, epoch, state.step, history, written)


def load_model(ckpt: Checkpoint | str | Path) -> SaliencyModel:
    """Rebuild the model described by a checkpoint and load its weights."""
    ckpt = load_checkpoint(ckpt) if isinstance(ckpt, (str, Path)) else ckpt
    try:
        cfg = TrainConfig.from_dict(ckpt.config)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint config unreadable: {e}") from None
    model = SaliencyModel(cfg.model, cfg.mode, seed=cfg.seed)
    restore(ckpt, model)
    return model


def pretrain_depth(model: SaliencyModel, samples: Sequence[Sample], steps: int, lr: float = 1e-3,
                   batch: int = 4, seed: int = 0) -> list[float]:
    """Fit the depth estimator alone to the samples' depth maps (L1 loss). Returns per-step losses."""
    if model.depth is None:
        raise ValueError("model has no depth branch")
    enc = model.cfg.encoder
    data = stack_samples(samples, (enc.input_h, enc.input_w), need_depth=True)
    params = list(model.depth.estimator.named_parameters())
    state, rng = AdamState(), np.random.default_rng(seed)
    cfg = OptimConfig(lr=lr)
    model.depth.estimator.train()
    losses = []
    while len(losses) < steps:
        for idx in epoch_batches(rng, len(samples), batch):
            model.depth.estimator.zero_grad()
            pred = model.depth.estimator(Tensor(data.rgb[idx])).depth_map
            loss = (pred - Tensor(data.depth[idx])).abs().mean()
            loss.backward()
            adam_step(params, state, lr, cfg)
            losses.append(loss.item())
            if len(losses) >= steps:
                break
    return losses
