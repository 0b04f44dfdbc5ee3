"""Composite saliency objective: weighted structure, SSIM, L2 and edge-aware smoothness terms."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import functional as F
from .tensor import ShapeError, Tensor, as_tensor, tsum


@dataclass(frozen=True)
class LossWeights:
    st: float = 0.2
    ssim: float = 0.3
    l2: float = 0.2
    se: float = 0.3

    def __post_init__(self):
        if min(self.st, self.ssim, self.l2, self.se) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class StructureLossConfig:
    psi: float = 5.0
    window: int = 7

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("structure-loss window must be odd and >= 1")
        if self.psi < 0:
            raise ValueError("psi must be >= 0")


@dataclass(frozen=True)
class SSIMConfig:
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    window: int = 7

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 1")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    structure: StructureLossConfig = field(default_factory=StructureLossConfig)
    ssim: SSIMConfig = field(default_factory=SSIMConfig)
    l2_mode: str = "mse"  # or "param_norm"

    def __post_init__(self):
        if self.l2_mode not in ("mse", "param_norm"):
            raise ValueError(f"unknown l2_mode {self.l2_mode!r}")


@dataclass
class LossReport:
    st: float
    ssim: float
    l2: float
    se: float
    total: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("objective")
        return d


def _check_pair(y: Tensor, x: np.ndarray) -> None:
    if y.shape != x.shape:
        raise ShapeError(f"prediction {y.shape} and target {x.shape} differ")
    if y.ndim != 4 or y.shape[1] != 1:
        raise ShapeError(f"expected [N, 1, H, W] maps, got {y.shape}")


def _check_range(name: str, a: np.ndarray) -> None:
    if not np.isfinite(a).all() or a.min() < 0 or a.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")


def _np(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a)


def hard_pixel_weights(x: np.ndarray, window: int) -> np.ndarray:
    """``|local mean of x - x|`` with a zero-padded ``window``-wide box (padding counted)."""
    r = window // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    local = sliding_window_view(xp, (window, window), axis=(2, 3)).mean(axis=(4, 5))
    return np.abs(local - x)


def structure_loss(y: Tensor, x, cfg: StructureLossConfig = StructureLossConfig()) -> Tensor:
    """Weighted IoU loss, averaged over the batch.

    Per image: ``1 - sum(x y (1 + psi w)) / sum((x + y - x y)(1 + psi w))``.
    An image whose prediction and target are both empty contributes 0.
    """
    y = as_tensor(y)
    x = _np(x).astype(y.dtype)
    _check_pair(y, x)
    _check_range("prediction", y.data)
    _check_range("target", x)
    wgt = 1.0 + cfg.psi * hard_pixel_weights(x, cfg.window)
    axes = (1, 2, 3)
    inter = tsum(y * Tensor(x * wgt, dtype=y.dtype), axes)
    union = tsum(y * Tensor((1.0 - x) * wgt, dtype=y.dtype), axes) + Tensor((x * wgt).sum(axis=axes), dtype=y.dtype)
    empty = (union.data == 0).astype(y.dtype)
    ratio = inter / (union + Tensor(empty, dtype=y.dtype)) + Tensor(empty, dtype=y.dtype)
    return 1.0 - ratio.mean()


def ssim_loss(y, x, cfg: SSIMConfig = SSIMConfig()) -> Tensor:
    """``1 - mean`` SSIM over every ``window x window`` placement (uniform window)."""
    y, x = as_tensor(y), as_tensor(x)
    _check_pair(y, x.data)
    k = cfg.window
    if y.shape[2] < k or y.shape[3] < k:
        raise ShapeError(f"map {y.shape[2:]} smaller than SSIM window {k}", dim="HW")
    c1, c2 = cfg.c1, cfg.c2
    mu_y, mu_x = F.box_mean(y, k), F.box_mean(x, k)
    var_y = F.box_mean(y * y, k) - mu_y * mu_y
    var_x = F.box_mean(x * x, k) - mu_x * mu_x
    cov = F.box_mean(y * x, k) - mu_y * mu_x
    num = (2.0 * mu_y * mu_x + c1) * (2.0 * cov + c2)
    den = (mu_y * mu_y + mu_x * mu_x + c1) * (var_y + var_x + c2)
    return 1.0 - (num / den).mean()


def l2_term(y, x) -> Tensor:
    y = as_tensor(y)
    x = _np(x).astype(y.dtype)
    if y.shape != x.shape:
        raise ShapeError(f"prediction {y.shape} and target {x.shape} differ")
    d = y - Tensor(x, dtype=y.dtype)
    return (d * d).mean()


def param_norm_term(params: Sequence[Tensor]) -> Tensor:
    """Mean squared parameter value across all given tensors."""
    total = None
    count = 0
    for p in params:
        s = tsum(p * p)
        total = s if total is None else total + s
        count += p.size
    return total * (1.0 / count)


def smoothness_loss(y, rgb) -> Tensor:
    """Edge-aware smoothness with forward differences.

    ``mean_x(|dx y| exp(-|dx I|)) + mean_y(|dy y| exp(-|dy I|))``, ``I`` the
    channel-mean image; each mean runs over its own valid difference positions
    and a direction with no valid positions contributes 0.
    """
    y = as_tensor(y)
    img = _np(rgb).mean(axis=1, keepdims=True).astype(y.dtype)
    if img.shape[2:] != y.shape[2:] or img.shape[0] != y.shape[0]:
        raise ShapeError(f"image {img.shape} and prediction {y.shape} differ spatially", dim="HW")
    terms = []
    _, _, h, w = y.shape
    if w > 1:
        wx = np.exp(-np.abs(img[:, :, :, 1:] - img[:, :, :, :-1]))
        terms.append(((y[:, :, :, 1:] - y[:, :, :, :-1]).abs() * Tensor(wx, dtype=y.dtype)).mean())
    if h > 1:
        wy = np.exp(-np.abs(img[:, :, 1:, :] - img[:, :, :-1, :]))
        terms.append(((y[:, :, 1:, :] - y[:, :, :-1, :]).abs() * Tensor(wy, dtype=y.dtype)).mean())
    if not terms:
        return (y * 0.0).sum()
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def total_loss(y: Tensor, x, rgb, cfg: LossConfig = LossConfig(), params: Sequence[Tensor] | None = None) -> LossReport:
    """Evaluate all four terms and their weighted sum; ``report.objective`` is differentiable."""
    w = cfg.weights
    st = structure_loss(y, x, cfg.structure)
    ss = ssim_loss(y, Tensor(_np(x), dtype=as_tensor(y).dtype), cfg.ssim)
    if cfg.l2_mode == "mse":
        l2 = l2_term(y, x)
    else:
        if params is None:
            raise ValueError("l2_mode='param_norm' needs the parameter list")
        l2 = param_norm_term(params)
    se = smoothness_loss(y, rgb)
    objective = st * w.st + ss * w.ssim + l2 * w.l2 + se * w.se
    vals = [st.item(), ss.item(), l2.item(), se.item()]
    total = w.st * vals[0] + w.ssim * vals[1] + w.l2 * vals[2] + w.se * vals[3]
    return LossReport(*vals, total=total, objective=objective)
