# # Overfitting eight synthetic scenes
#
# A quick sanity check that the whole pipeline learns: train the full model on
# eight 64x64 scenes and watch train-set MAE and F-beta improve. At the default
# 120 steps this takes about three minutes on one CPU core; pass a smaller
# number on the command line for a shorter run.

import sys
import tempfile

import numpy as np

from pyrasal.dataset import generate_synthetic
from pyrasal.metrics import f_measure, mae
from pyrasal.model import AblationMode, ModelConfig
from pyrasal.train import OptimConfig, TrainConfig, stack_samples, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 120
mode = AblationMode(sys.argv[2]) if len(sys.argv) > 2 else AblationMode.RGB_ONLY

with tempfile.TemporaryDirectory() as root:
    samples = generate_synthetic(root, 8, 64, seed=0).load_all()

# ## Settings
#
# Batch of four, a constant learning rate and the default loss weights.

cfg = TrainConfig(ModelConfig(), OptimConfig(lr=5e-5, batch=4, lr_decay=1.0, epochs=steps, max_steps=steps),
                  mode=mode, seed=0)
batch = stack_samples(samples, (64, 64), need_depth=mode is AblationMode.M1_PROVIDED_DEPTH)


def report(model, label):
    pred = model.predict(batch.rgb, batch.depth)
    m = np.mean([mae(p, g) for p, g in zip(pred, batch.gt)])
    f = np.mean([f_measure(p, g) for p, g in zip(pred, batch.gt)])
    print(f"{label:<12} MAE {m:.4f}  F {f:.4f}")


def log(rec):
    if rec["step"] % 20 == 0 or rec["step"] == 1:
        print(f"step {rec['step']:>4}  loss {rec['total']:.4f}  (st {rec['st']:.3f} ssim {rec['ssim']:.3f} "
              f"l2 {rec['l2']:.3f} se {rec['se']:.3f})")


result = train(samples, cfg, on_step=log)
report(result.model, f"after {result.step}")

# ## What the model sees
#
# A coarse ASCII rendering of the first prediction next to its ground truth.

pred = result.model.predict(batch.rgb[:1], None if batch.depth is None else batch.depth[:1])[0, 0]
shades = " .:-=+*#%@"
for row_p, row_g in zip(pred[::4], batch.gt[0, 0][::4]):
    left = "".join(shades[min(int(v * 10), 9)] for v in row_p[::2])
    right = "".join("#" if v else "." for v in row_g[::2])
    print(left, " ", right)
