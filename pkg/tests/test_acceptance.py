"""Acceptance criteria, one test per criterion; the terminal summary prints a PASS/FAIL line for each.

The training-based criteria share one module-scoped cache of overfit runs so each
mode is trained once (roughly three minutes per run on one core).
"""
import hashlib
import time

import numpy as np
import pytest

from pyrasal import gradcheck
from pyrasal.dataset import generate_synthetic
from pyrasal.depth import fuse_depth
from pyrasal.encoder import Encoder, EncoderConfig
from pyrasal.losses import (LossConfig, LossWeights, SSIMConfig, StructureLossConfig, l2_term, smoothness_loss,
                            ssim_loss, structure_loss, total_loss)
from pyrasal.metrics import e_measure, evaluate, f_measure, mae, s_measure
from pyrasal.model import AblationMode, ModelConfig, SaliencyModel, component_rngs
from pyrasal.tensor import Tensor
from pyrasal.train import OptimConfig, TrainConfig, stack_samples, train

from test_losses import structure_oracle, t
from test_metrics import f_sweep_oracle, rect_gt, s_oracle

CRITERIA = {
    "test_criterion_1_gradient_integrity": "1 gradient integrity",
    "test_criterion_2_architecture_contract": "2 architecture contract",
    "test_criterion_3_loss_oracles": "3 loss oracles",
    "test_criterion_4_metric_oracles": "4 metric oracles",
    "test_criterion_5_overfit": "5 overfit experiment",
    "test_criterion_6_ablation_direction": "6 ablation direction",
    "test_criterion_7_mode_matrix": "7 mode matrix",
    "test_criterion_8_determinism_and_resume": "8 determinism and resume",
}
# measured values, shown next to each criterion in the summary
MEASURED: dict[str, str] = {}

OVERFIT_STEPS = 120  # the budget allows 300
OVERFIT = OptimConfig(lr=5e-5, batch=4, lr_decay=1.0, epochs=OVERFIT_STEPS, max_steps=OVERFIT_STEPS)


def sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def samples(tmp_path_factory):
    return generate_synthetic(tmp_path_factory.mktemp("overfit"), 8, 64, seed=0).load_all()


@pytest.fixture(scope="module")
def overfit(samples, tmp_path_factory):
    """``overfit(mode)`` trains once per mode and returns (result, checkpoint, train MAE, train F, seconds)."""
    cache = {}

    def run(mode: AblationMode):
        if mode not in cache:
            out = tmp_path_factory.mktemp(mode.value)
            cfg = TrainConfig(ModelConfig(), OVERFIT, mode=mode, seed=0, checkpoint_every=OVERFIT_STEPS)
            start = time.perf_counter()
            res = train(samples, cfg, out_dir=out)
            elapsed = time.perf_counter() - start
            batch = stack_samples(samples, (64, 64), need_depth=mode is AblationMode.M1_PROVIDED_DEPTH)
            pred = res.model.predict(batch.rgb, batch.depth)
            maes = [mae(p, g) for p, g in zip(pred, batch.gt)]
            fs = [f_measure(p, g) for p, g in zip(pred, batch.gt)]
            cache[mode] = (res, res.checkpoints[-1], float(np.mean(maes)), float(np.mean(fs)), elapsed)
        return cache[mode]

    return run


def test_criterion_1_gradient_integrity():
    """Every gradcheck case, composites included, under 1e-4 relative error in under five minutes."""
    start = time.perf_counter()
    results = gradcheck.run()
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    MEASURED["test_criterion_1_gradient_integrity"] = (
        f"{len(results)} cases, worst {worst.name} {worst.max_rel_error:.2e}, {elapsed:.0f}s")
    assert {"composite", "composite_m1", "encoder"} <= {r.name for r in results}
    assert [r.name for r in results if not r.passed] == []
    assert elapsed < 300


def test_criterion_2_architecture_contract():
    """64x64 input: streams at 32/16/8/4 with 256 channels; pyramid call counts per stream."""
    cfg = EncoderConfig()
    enc = Encoder(cfg, component_rngs(0)["encoder"], pyramid_rng=component_rngs(0)["pyramid"])
    enc.pyramid.reset_counts()
    pyr = enc(Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64))))
    shapes = [s.shape for s in pyr.streams()]
    assert shapes == [(1, 256, 32, 32), (1, 256, 16, 16), (1, 256, 8, 8), (1, 256, 4, 4)]
    counts = enc.pyramid.call_counts()
    MEASURED["test_criterion_2_architecture_contract"] = f"counts {counts}"
    assert counts == {"alpha": (3, 1), "beta": (2, 1), "gamma": (1, 1), "sigma": (1, 0)}


def test_criterion_3_loss_oracles():
    """Unit cases within 1e-6 (identities within 1e-9) and the weighted total within 1e-10."""
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    y = np.full((2, 2), 0.5)
    st = structure_loss(t(y), t(x), StructureLossConfig(psi=0.0, window=1)).item()
    assert abs(st - structure_oracle(y, x, 0.0, np.zeros(4))) < 1e-6 and abs(st - 0.8) < 1e-6
    perfect = (np.random.default_rng(0).uniform(size=(6, 6)) > 0.5).astype(float)
    assert abs(structure_loss(t(perfect), t(perfect)).item()) < 1e-9

    c1 = (0.01 * 1.0) ** 2
    ssim_want = 1 - (2 * 0.16 + c1) / (0.04 + 0.64 + c1)
    ssim = ssim_loss(t(np.full((3, 3), 0.2)), t(np.full((3, 3), 0.8)), SSIMConfig(window=3)).item()
    assert abs(ssim - ssim_want) < 1e-6
    img = np.random.default_rng(1).uniform(size=(8, 8))
    assert abs(ssim_loss(t(img), t(img)).item()) < 1e-9

    assert abs(l2_term(t([[0.5, 0.5]]), t([[0.0, 1.0]])).item() - 0.25) < 1e-6
    assert abs(smoothness_loss(t([[0.0, 1.0]]), np.zeros((1, 3, 1, 2))).item() - 1.0) < 1e-6
    assert abs(smoothness_loss(t(np.full((4, 4), 0.3)), np.random.default_rng(2).uniform(size=(1, 3, 4, 4))).item()) < 1e-9

    rng = np.random.default_rng(3)
    w = LossWeights()
    assert (w.st, w.ssim, w.l2, w.se) == (0.2, 0.3, 0.2, 0.3)
    worst = 0.0
    for _ in range(10):
        yy = Tensor(rng.uniform(size=(2, 1, 8, 8)), dtype=np.float64)
        xx = (rng.uniform(size=(2, 1, 8, 8)) > 0.5).astype(float)
        rep = total_loss(yy, xx, rng.uniform(size=(2, 3, 8, 8)), LossConfig())
        worst = max(worst, abs(rep.total - (w.st * rep.st + w.ssim * rep.ssim + w.l2 * rep.l2 + w.se * rep.se)))
    MEASURED["test_criterion_3_loss_oracles"] = f"structure 2x2 {st:.6f}, ssim {ssim:.6f}, total gap {worst:.1e}"
    assert worst < 1e-10


def test_criterion_4_metric_oracles():
    """Perfect map scores (0, 1, 1, 1); 4x4 F sweep is exact; S-measure matches its dual."""
    gt = rect_gt(16, 16, 3, 4, 11, 13)
    rep = evaluate(gt, gt)
    assert abs(rep.mae) < 1e-6 and abs(rep.f_beta - 1) < 1e-6
    assert abs(rep.e_measure - 1) < 1e-6 and abs(rep.s_measure - 1) < 1e-6

    g4 = rect_gt(4, 4, 0, 0, 4, 2)
    p4 = 0.8 * g4 + 0.3 * (1 - g4)
    want, scores = f_sweep_oracle(p4, g4)
    assert f_measure(p4, g4) == want
    assert f_measure(p4, g4, reduce="mean") == float(np.mean(scores))

    rng = np.random.default_rng(4)
    gap = 0.0
    for _ in range(4):
        g = (rng.uniform(size=(7, 9)) > 0.6).astype(float)
        g[3, 4] = 1.0
        p = rng.uniform(size=(7, 9))
        gap = max(gap, abs(s_measure(p, g) - s_oracle(p, g)))
    MEASURED["test_criterion_4_metric_oracles"] = f"perfect {tuple(round(v, 6) for v in rep.as_dict().values())}, S gap {gap:.1e}"
    assert gap < 1e-6


def test_criterion_5_overfit(overfit):
    """Eight 64x64 samples, rgb_only, within 300 steps: train MAE < 0.05 and F > 0.90."""
    res, _, m, f, secs = overfit(AblationMode.RGB_ONLY)
    MEASURED["test_criterion_5_overfit"] = f"{res.step} steps, MAE {m:.4f}, F {f:.4f}, {secs:.0f}s"
    assert res.step <= 300
    assert m < 0.05 and f > 0.90


def test_criterion_6_ablation_direction(overfit):
    """Without the pyramid block the same budget ends at a train MAE no lower than the full model's."""
    _, _, full_mae, _, _ = overfit(AblationMode.RGB_ONLY)
    res, _, m3_mae, _, _ = overfit(AblationMode.M3_NO_PYRAMID)
    pyramid_params = [n for n, _ in res.model.named_parameters() if n.startswith("encoder.pyramid.")]
    MEASURED["test_criterion_6_ablation_direction"] = (
        f"full MAE {full_mae:.4f}, m3 MAE {m3_mae:.4f}, m3 pyramid params {len(pyramid_params)}")
    assert pyramid_params == []
    assert m3_mae >= full_mae


def test_criterion_7_mode_matrix(overfit, samples):
    """Depth modes finish the overfit run with checkpoints distinct from rgb_only; the bypass is exact."""
    _, rgb_ckpt, _, _, _ = overfit(AblationMode.RGB_ONLY)
    notes = []
    for mode in (AblationMode.M1_PROVIDED_DEPTH, AblationMode.M2_ESTIMATED_DEPTH):
        res, ckpt, m, f, _ = overfit(mode)
        notes.append(f"{mode.value} MAE {m:.4f} F {f:.4f}")
        assert res.step == OVERFIT_STEPS and all(np.isfinite(r["total"]) for r in res.history)
        assert m < 0.05 and f > 0.90
        assert sha(ckpt) != sha(rgb_ckpt)

    model = SaliencyModel(ModelConfig(), AblationMode.RGB_ONLY, seed=0)
    model.eval()
    x = Tensor(np.stack([s.rgb for s in samples[:2]]))
    fused = model.features(x)
    plain = model.encoder(x)
    assert fuse_depth(plain.sigma, None, None) is plain.sigma
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(fused.streams(), plain.streams()))
    MEASURED["test_criterion_7_mode_matrix"] = ", ".join(notes) + ", bypass byte-identical"


def test_criterion_8_determinism_and_resume(samples, tmp_path):
    """Same seed gives the same checkpoint bytes; a resumed run reproduces the next-step loss."""
    cfg = lambda epochs: TrainConfig(ModelConfig(), OptimConfig(lr=5e-5, batch=4, lr_decay=0.9, epochs=epochs),
                                     seed=11)
    a = train(samples, cfg(1), out_dir=tmp_path / "a")
    b = train(samples, cfg(1), out_dir=tmp_path / "b")
    assert sha(a.checkpoints[-1]) == sha(b.checkpoints[-1])

    unbroken = train(samples, cfg(2), out_dir=tmp_path / "unbroken")
    resumed = train(samples, cfg(2), out_dir=tmp_path / "b", resume=b.checkpoints[-1])
    want = unbroken.history[len(b.history)]
    got = resumed.history[0]
    gap = abs(got["total"] - want["total"])
    MEASURED["test_criterion_8_determinism_and_resume"] = f"hashes equal, resumed step {got['step']} loss gap {gap:.1e}"
    assert got["step"] == want["step"]
    assert gap <= 1e-12
    assert sha(resumed.checkpoints[-1]) == sha(unbroken.checkpoints[-1])
