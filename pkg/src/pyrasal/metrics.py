"""Saliency evaluation: MAE, F-measure, enhanced-alignment (E) and structure (S) measures.

All functions take a float prediction in [0, 1] and a ground truth that is
binarised at 0.5, both 2-D ``[H, W]`` (a leading singleton channel is accepted).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import GT_THRESHOLD, load_image

EPS = float(np.spacing(1.0))
THRESHOLDS = np.arange(1, 256) / 255.0
IMAGE_SUFFIXES = (".pgm", ".ppm")


def _prep(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 3 and pred.shape[0] == 1:
        pred = pred[0]
    if gt.ndim == 3 and gt.shape[0] == 1:
        gt = gt[0]
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} must be equal 2-D maps")
    if not np.isfinite(pred).all() or pred.min() < 0 or pred.max() > 1:
        raise ValueError("prediction values must lie in [0, 1]")
    return pred, gt >= GT_THRESHOLD


def mae(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    return float(np.abs(pred - gt).mean())


def precision_recall(pred, gt, thresholds: np.ndarray = THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall of ``pred >= t`` for each threshold; precision is 0 when nothing is predicted."""
    pred, gt = _prep(pred, gt)
    n_pos = gt.sum()
    if n_pos == 0:
        raise ValueError("F-measure is undefined for an all-background ground truth")
    # cumulative histogram trick: counts of predictions at or above each threshold
    order = np.sort(pred.ravel())
    fg = np.sort(pred[gt])
    above = order.size - np.searchsorted(order, thresholds, side="left")
    tp = fg.size - np.searchsorted(fg, thresholds, side="left")
    precision = np.divide(tp, above, out=np.zeros(len(thresholds)), where=above > 0)
    return precision, tp / n_pos


def f_scores(pred, gt, beta2: float = 0.3) -> np.ndarray:
    p, r = precision_recall(pred, gt)
    num = (1 + beta2) * p * r
    den = beta2 * p + r
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def f_measure(pred, gt, beta2: float = 0.3, reduce: str = "max") -> float:
    """F-beta over the 255 thresholds k/255; ``reduce`` is ``"max"`` or ``"mean"``."""
    f = f_scores(pred, gt, beta2)
    if reduce == "max":
        return float(f.max())
    if reduce == "mean":
        return float(f.mean())
    raise ValueError(f"unknown reduce {reduce!r}")


def e_measure(pred, gt) -> float:
    """Enhanced-alignment measure with the adaptive threshold ``min(2 mean(pred), 1)``.

    Pixels strictly above the threshold are foreground; once the threshold is
    clamped to 1, pixels equal to 1 count (otherwise a perfect map with more than
    half foreground would binarise to nothing). Degenerate ground truths: all background scores ``mean(1 - fm)``, all
    foreground scores ``mean(fm)``, ``fm`` being the binarised prediction.
    """
    pred, gt = _prep(pred, gt)
    thr = 2.0 * pred.mean()
    fm = (pred > thr if thr < 1.0 else pred >= 1.0).astype(np.float64)
    g = gt.astype(np.float64)
    if g.sum() == 0:
        enhanced = 1.0 - fm
    elif g.sum() == g.size:
        enhanced = fm
    else:
        dfm, dgt = fm - fm.mean(), g - g.mean()
        align = 2.0 * dfm * dgt / (dfm * dfm + dgt * dgt + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


# -- S-measure ------------------------------------------------------------------
def _object_similarity(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma + EPS))


def s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = pred * gt
    bg = (1.0 - pred) * (1.0 - gt)
    u = gt.mean()
    return u * _object_similarity(fg[gt]) + (1.0 - u) * _object_similarity(bg[~gt])


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def centroid(gt: np.ndarray) -> tuple[int, int]:
    """Split point (x, y) in 1-based pixel units: the foreground centroid rounded half up.

    An empty ground truth splits at the image centre.
    """
    h, w = gt.shape
    if not gt.any():
        return _round_half_up(w / 2), _round_half_up(h / 2)
    rows, cols = np.nonzero(gt)
    return _round_half_up(cols.mean() + 1), _round_half_up(rows.mean() + 1)


def region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    denom = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / denom
    sy = ((gt - y) ** 2).sum() / denom
    sxy = ((pred - x) * (gt - y)).sum() / denom
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + EPS))
    return 1.0 if b == 0 else 0.0


def s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = centroid(gt)
    x, y = min(x, w), min(y, h)
    g = gt.astype(np.float64)
    quads = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    area = h * w
    weights = [x * y / area, (w - x) * y / area, x * (h - y) / area]
    weights.append(1.0 - sum(weights))
    return float(sum(wt * region_ssim(pred[q], g[q]) for wt, q in zip(weights, quads)))


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prep(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt)
    return float(max(score, 0.0))


# -- reports --------------------------------------------------------------------
@dataclass
class MetricReport:
    mae: float
    f_beta: float
    e_measure: float
    s_measure: float

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, reports: list["MetricReport"]) -> "MetricReport":
        if not reports:
            raise ValueError("no reports to average")
        return cls(*(float(np.mean([getattr(r, k) for r in reports])) for k in
                     ("mae", "f_beta", "e_measure", "s_measure")))


def evaluate(pred, gt, beta2: float = 0.3, f_reduce: str = "max", alpha: float = 0.5) -> MetricReport:
    """All four metrics for one map; F is reported as 0 for an all-background ground truth."""
    _, g = _prep(pred, gt)
    f = f_measure(pred, gt, beta2, f_reduce) if g.any() else 0.0
    return MetricReport(mae(pred, gt), f, e_measure(pred, gt), s_measure(pred, gt, alpha))


@dataclass
class DirEvaluation:
    summary: MetricReport
    per_image: dict[str, MetricReport]
    unmatched: list[str]


def _index(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate_dir(pred_dir, gt_dir, out_dir=None, beta2: float = 0.3, f_reduce: str = "max") -> DirEvaluation:
    """Score every prediction that has a same-stem ground truth; write ``metrics.csv`` and ``summary.json``.

    Files present on only one side are reported in ``unmatched`` and skipped.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _index(pred_dir), _index(gt_dir)
    common = sorted(preds.keys() & gts.keys())
    if not common:
        raise ValueError(f"no matching prediction/ground-truth images in {pred_dir} and {gt_dir}")
    unmatched = sorted([str(preds[k]) for k in preds.keys() - gts.keys()] +
                       [str(gts[k]) for k in gts.keys() - preds.keys()])
    per_image = {}
    for name in common:
        pred = load_image(preds[name])
        gt = load_image(gts[name])
        per_image[name] = evaluate(pred.mean(axis=0), gt[0], beta2, f_reduce)
    summary = MetricReport.mean([per_image[k] for k in common])
    out = Path(out_dir) if out_dir is not None else pred_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "mae", "f_beta", "e_measure", "s_measure"])
        for name in common:
            r = per_image[name]
            writer.writerow([name, repr(r.mae), repr(r.f_beta), repr(r.e_measure), repr(r.s_measure)])
    payload = {"count": len(common), "f_reduce": f_reduce, "beta2": beta2, **summary.as_dict(),
               "unmatched": unmatched}
    (out / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return DirEvaluation(summary, per_image, unmatched)
