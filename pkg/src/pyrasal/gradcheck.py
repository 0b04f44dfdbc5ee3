"""Finite-difference verification of every differentiable op and of the full model objective.

Each case builds a scalar function of some leaf tensors. The analytic gradient
from one backward pass is compared against central differences on a sample of
entries of every leaf, all in wide (float64) precision.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import functional as F
from . import tensor as T
from .encoder import Encoder, EncoderConfig
from .losses import (LossConfig, SSIMConfig, StructureLossConfig, l2_term, smoothness_loss, ssim_loss,
                     structure_loss, total_loss)
from .model import ModelConfig, SaliencyModel
from .nn import DASPP, ChannelAttention, ChannelAttentionConfig, DASPPConfig, MHSA, MHSAConfig
from .tensor import Tensor, wide_precision

THRESHOLD = 1e-4
STEP = 1e-4
# Each entry is differenced at STEP, STEP/10 and STEP/100 and the best agreement is kept: a
# ReLU kink lying within one step of the evaluation point spoils only the coarser quotients.
LADDER = (1.0, 0.1, 0.01)
# Denominator floor. Entries whose gradient is tiny next to the largest gradient of the case
# (e.g. a conv bias feeding batch norm, true gradient 0) are judged on absolute error against
# SCALE_FLOOR times that largest gradient; NOISE_FACTOR * eps * |f| / step bounds the roundoff.
REL_FLOOR = 1e-6
SCALE_FLOOR = 1e-5
NOISE_FACTOR = 1e5

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def leaf(a: np.ndarray) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def check(name: str, fn: Callable[[], Tensor], leaves: list[Tensor], rng: np.random.Generator,
          per_leaf: int = 6, step: float = STEP) -> CheckResult:
    for t in leaves:
        t.grad = None
    root = fn()
    root.backward()
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data)) for t in leaves]
    scale = max(float(np.abs(g).max()) for g in analytic)
    f0 = abs(root.item())
    worst, where, count = 0.0, "", 0
    for li, t in enumerate(leaves):
        flat = t.data.reshape(-1)
        k = min(per_leaf, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        for i in idx:
            a = float(analytic[li].reshape(-1)[i])
            best = np.inf
            for factor in LADDER:
                h = step * factor
                orig = flat[i]
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                floor = max(REL_FLOOR, SCALE_FLOOR * scale, NOISE_FACTOR * np.finfo(np.float64).eps * max(f0, 1.0) / h)
                best = min(best, relative_error(a, (up - down) / (2 * h), floor))
                if best < THRESHOLD * 1e-2:
                    break
            count += 1
            if best > worst:
                worst, where = best, f"leaf {li} entry {int(i)}"
    return CheckResult(name, worst, count, where)


# -- op cases -------------------------------------------------------------------
def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _unary(op, positive=False, kink=False):
    def build(rng):
        if positive:
            x = leaf(rng.uniform(0.5, 2.0, (3, 4)))
        elif kink:
            x = leaf(_away_from_zero(rng, (3, 4)))
        else:
            x = leaf(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))
        return (lambda: T.tsum(op(x) * Tensor(w))), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = leaf(rng.standard_normal((2, 5)))
        b = leaf(rng.uniform(0.5, 2.0, (2, 5)) if positive_b else rng.standard_normal((2, 5)))
        w = rng.standard_normal((2, 5))
        return (lambda: T.tsum(op(a, b) * Tensor(w))), [a, b]
    return build


def _case_reduce(op):
    def build(rng):
        x = leaf(rng.standard_normal((2, 3, 4)))
        w = rng.standard_normal((2, 4))
        return (lambda: T.tsum(op(x, 1) * Tensor(w))), [x]
    return build


def _case_reshape(rng):
    x = leaf(rng.standard_normal((2, 6)))
    w = rng.standard_normal((3, 4))
    return (lambda: T.tsum(x.reshape(3, 4) * Tensor(w))), [x]


def _case_transpose(rng):
    x = leaf(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((4, 2, 3))
    return (lambda: T.tsum(x.transpose(2, 0, 1) * Tensor(w))), [x]


def _case_getitem(rng):
    x = leaf(rng.standard_normal((4, 5)))
    idx = np.array([0, 2, 2, 3])  # repeated index exercises scatter-add
    w = rng.standard_normal((4, 3))
    return (lambda: T.tsum(x[idx, 1:4] * Tensor(w))), [x]


def _case_concat(rng):
    a, b = leaf(rng.standard_normal((2, 2, 3, 3))), leaf(rng.standard_normal((2, 3, 3, 3)))
    w = rng.standard_normal((2, 5, 3, 3))
    return (lambda: T.tsum(T.concat_channels([a, b]) * Tensor(w))), [a, b]


def _case_matmul(rng):
    a, b = leaf(rng.standard_normal((2, 3, 4))), leaf(rng.standard_normal((2, 4, 5)))
    w = rng.standard_normal((2, 3, 5))
    return (lambda: T.tsum(T.matmul(a, b) * Tensor(w))), [a, b]


def _case_softmax(rng):
    x = leaf(rng.standard_normal((3, 5)))
    w = rng.standard_normal((3, 5))
    return (lambda: T.tsum(T.softmax(x, axis=-1) * Tensor(w))), [x]


def _case_conv2d(rng):
    x = leaf(rng.standard_normal((2, 3, 9, 9)))
    k = leaf(rng.standard_normal((4, 3, 3, 3)))
    b = leaf(rng.standard_normal(4))
    out = F.conv2d(x, k, b, stride=2, padding=2, dilation=2)
    w = rng.standard_normal(out.shape)
    return (lambda: T.tsum(F.conv2d(x, k, b, stride=2, padding=2, dilation=2) * Tensor(w))), [x, k, b]


def _case_conv1x1(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 4)))
    k = leaf(rng.standard_normal((5, 3, 1, 1)))
    b = leaf(rng.standard_normal(5))
    w = rng.standard_normal((2, 5, 4, 4))
    return (lambda: T.tsum(F.conv2d(x, k, b) * Tensor(w))), [x, k, b]


def _spatial(op, shape=(2, 3, 4, 4)):
    def build(rng):
        x = leaf(rng.standard_normal(shape))
        w = rng.standard_normal(op(x).shape)
        return (lambda: T.tsum(op(x) * Tensor(w))), [x]
    return build


def _case_channel_scale(rng):
    x = leaf(rng.standard_normal((2, 3, 4, 4)))
    a = leaf(rng.standard_normal((2, 3)))
    w = rng.standard_normal((2, 3, 4, 4))
    return (lambda: T.tsum(F.channel_scale(x, a) * Tensor(w))), [x, a]


def _case_linear(rng):
    x = leaf(rng.standard_normal((2, 5, 4)))
    wt = leaf(rng.standard_normal((4, 3)))
    b = leaf(rng.standard_normal(3))
    w = rng.standard_normal((2, 5, 3))
    return (lambda: T.tsum(F.linear(x, wt, b) * Tensor(w))), [x, wt, b]


def _case_batchnorm(training: bool):
    def build(rng):
        x = leaf(rng.standard_normal((3, 2, 3, 3)))
        g, b = leaf(rng.uniform(0.5, 1.5, 2)), leaf(rng.standard_normal(2))
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
        w = rng.standard_normal((3, 2, 3, 3))

        def fn():
            # fresh buffer copies: the running-stat update must not leak between evaluations
            return T.tsum(F.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training) * Tensor(w))
        return fn, [x, g, b]
    return build


def _case_layernorm(rng):
    x = leaf(rng.standard_normal((2, 3, 6)))
    g, b = leaf(rng.uniform(0.5, 1.5, 6)), leaf(rng.standard_normal(6))
    w = rng.standard_normal((2, 3, 6))
    return (lambda: T.tsum(F.layernorm(x, g, b) * Tensor(w))), [x, g, b]


def _module_case(make_module, shape):
    def build(rng):
        with wide_precision():
            mod = make_module(rng)
        x = leaf(rng.standard_normal(shape))
        for p in mod.parameters():
            p.data = rng.standard_normal(p.shape) * 0.5
        w = rng.standard_normal(mod(x).shape)
        return (lambda: T.tsum(mod(x) * Tensor(w))), [x] + list(mod.parameters())
    return build


def _loss_case(fn_of_y, gt_binary=True):
    def build(rng):
        z = leaf(rng.standard_normal((2, 1, 8, 8)))
        x = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64) if gt_binary else rng.random((2, 1, 8, 8))
        rgb = rng.random((2, 3, 8, 8))
        return (lambda: fn_of_y(T.sigmoid(z), x, rgb)), [z]
    return build


def _jitter_vectors(module, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Move biases and norm affines off their initial values.

    Zero biases leave some ReLU inputs exactly at 0 (a window that reads only zeros),
    where the function has no derivative; a generic point avoids that.
    """
    for p in module.parameters():
        if p.ndim == 1:
            p.data = p.data + rng.normal(0.0, scale, p.shape)


def small_encoder_config(size: int = 32) -> EncoderConfig:
    return EncoderConfig(input_h=size, input_w=size, stem_channels=(4, 6), transformer_depth=2,
                         transformer_stage_taps=(1, 2), token_dim=8, transformer_heads=2, d_feat=8,
                         pyramid_heads=2, daspp_branch_channels=4)


def _case_encoder(rng):
    with wide_precision():
        enc = Encoder(small_encoder_config(), rng)
    _jitter_vectors(enc, rng)
    x = leaf(rng.random((2, 3, 32, 32)))
    w = [rng.standard_normal(s.shape) for s in enc(x).streams()]

    def fn():
        pyr = enc(x)
        total = None
        for s, ws in zip(pyr.streams(), w):
            term = T.tsum(s * Tensor(ws))
            total = term if total is None else total + term
        return total
    return fn, [x] + list(enc.parameters())


def _composite(mode: str):
    def build(rng):
        with wide_precision():
            model = SaliencyModel(ModelConfig(small_encoder_config(), depth_channels=(4, 4, 8, 8)),
                                  mode=mode, seed=int(rng.integers(1 << 31)))
        _jitter_vectors(model, rng)
        rgb = rng.random((2, 3, 32, 32))
        gt = (rng.random((2, 1, 32, 32)) > 0.6).astype(np.float64)
        depth = rng.random((2, 1, 32, 32))
        x = leaf(rgb)
        use_depth = mode == "m1_provided_depth"

        def fn():
            y = model(x, Tensor(depth) if use_depth else None)
            return total_loss(y, gt, rgb, LossConfig()).objective
        return fn, [x] + list(model.parameters())
    return build


CASES: dict[str, Builder] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "neg": _unary(T.neg),
    "power": _unary(lambda a: T.power(a, 1.5), positive=True),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "sqrt": _unary(T.sqrt, positive=True),
    "abs": _unary(T.tabs, kink=True),
    "relu": _unary(T.relu, kink=True),
    "sigmoid": _unary(T.sigmoid),
    "gelu": _unary(T.gelu),
    "sum": _case_reduce(T.tsum),
    "mean": _case_reduce(T.mean),
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "getitem": _case_getitem,
    "concat_channels": _case_concat,
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "conv2d": _case_conv2d,
    "conv2d_1x1": _case_conv1x1,
    "upsample_bilinear": _spatial(lambda x: F.upsample_bilinear(x, 7, 9), (2, 3, 3, 4)),
    "avg_pool2d": _spatial(lambda x: F.avg_pool2d(x, 2)),
    "box_mean": _spatial(lambda x: F.box_mean(x, 3), (2, 2, 5, 6)),
    "global_avg_pool": _spatial(F.global_avg_pool),
    "channel_scale": _case_channel_scale,
    "linear": _case_linear,
    "batchnorm2d_train": _case_batchnorm(True),
    "batchnorm2d_eval": _case_batchnorm(False),
    "layernorm": _case_layernorm,
    "mhsa": _module_case(lambda rng: MHSA(MHSAConfig(4, 2), rng), (2, 5, 4)),
    "daspp": _module_case(lambda rng: DASPP(DASPPConfig(3, 2, (1, 2)), rng), (2, 3, 5, 5)),
    "channel_attention": _module_case(lambda rng: ChannelAttention(ChannelAttentionConfig(4, 2), rng),
                                      (2, 4, 3, 3)),
    "structure_loss": _loss_case(lambda y, x, rgb: structure_loss(y, x, StructureLossConfig(5.0, 3))),
    "ssim_loss": _loss_case(lambda y, x, rgb: ssim_loss(y, Tensor(x), SSIMConfig(window=3))),
    "l2_term": _loss_case(lambda y, x, rgb: l2_term(y, x)),
    "smoothness_loss": _loss_case(lambda y, x, rgb: smoothness_loss(y, rgb)),
    "total_loss": _loss_case(lambda y, x, rgb: total_loss(y, x, rgb, LossConfig(
        structure=StructureLossConfig(5.0, 3), ssim=SSIMConfig(window=3))).objective),
    "encoder": _case_encoder,
    "composite": _composite("rgb_only"),
    "composite_m1": _composite("m1_provided_depth"),
}

# sampled entries per leaf; the composites have hundreds of leaves
PER_LEAF = {"encoder": 2, "composite": 2, "composite_m1": 1}
# Composites contain thousands of ReLUs fed by batch statistics: a 1e-4 nudge to one weight moves
# many of them across their kink, so their ladder starts lower.
STEPS = {"encoder": 1e-5, "composite": 1e-5, "composite_m1": 1e-5}


def run(names: Iterable[str] | None = None, seed: int = 0) -> list[CheckResult]:
    names = list(CASES) if names is None else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    results = []
    with wide_precision():
        for name in names:
            # seeded by name so a case sees the same draws whatever subset is run
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            fn, leaves = CASES[name](rng)
            results.append(check(name, fn, leaves, rng, per_leaf=PER_LEAF.get(name, 6),
                                 step=STEPS.get(name, STEP)))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'checked':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:>12.3e}  {r.checked:>7}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
