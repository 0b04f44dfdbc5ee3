# # The command line, end to end
#
# Generates a dataset, trains a deliberately tiny model for a few steps,
# resumes it, writes saliency maps and scores them. Every step goes through
# `pyrasal.cli.main`, exactly as `python -m pyrasal ...` would.

import tempfile
from pathlib import Path

from pyrasal.cli import main

work = Path(tempfile.mkdtemp(prefix="pyrasal-demo-"))
print("working in", work)

# ## 1. A synthetic dataset
main(["synth", "--out", str(work / "data"), "--n", "6", "--size", "32", "--seed", "2"])

# ## 2. A run config
#
# Plain `key = value` lines; anything left out keeps its default. Small widths
# keep this demo to a few seconds.
config = work / "run.cfg"
config.write_text(f"""
manifest = {work / 'data' / 'manifest.txt'}
out_dir = {work / 'run'}
input_h = 32
input_w = 32
stem_channels = 8,12
transformer_depth = 2
transformer_stage_taps = 1,2
token_dim = 16
d_feat = 16
daspp_branch_channels = 8
lr = 1e-3
batch = 3
epochs = 2
""")

# ## 3. Train, then resume for one more epoch
main(["train", "--config", str(config)])
main(["train", "--config", str(config), "--set", "epochs=3",
      "--resume", str(work / "run" / "ckpt_epoch002.pasn")])

# ## 4. Inference and evaluation
main(["infer", "--config", str(config), "--set", "epochs=3", "--ckpt", str(work / "run" / "ckpt_epoch003.pasn"),
      "--input", str(work / "data" / "images"), "--output", str(work / "pred")])
code = main(["eval", "--pred", str(work / "pred"), "--gt", str(work / "data" / "masks")])
print("eval exit code", code)

# ## 5. Gradient checks from the command line
main(["gradcheck", "--ops", "softmax,conv2d"])
