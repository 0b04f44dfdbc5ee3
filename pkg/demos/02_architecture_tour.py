# # Walking through the network
#
# A 64x64 image goes through a small convolutional stem and a stack of
# transformer blocks. Four taps are lifted to 256 channels by the trans-heads,
# refined by the pyramid block, optionally enriched with depth and finally
# decoded into a one-channel saliency map at input resolution.

from collections import Counter

import numpy as np

from pyrasal import Tensor
from pyrasal.model import AblationMode, ModelConfig, SaliencyModel

rng = np.random.default_rng(0)
image = Tensor(rng.uniform(size=(1, 3, 64, 64)))
model = SaliencyModel(ModelConfig(), AblationMode.RGB_ONLY, seed=0)
model.eval()

# ## Feature streams
#
# The streams sit at 1/2, 1/4, 1/8 and 1/16 of the input.

model.encoder.pyramid.reset_counts()
pyramid = model.encoder(image)
for name, stream in zip(("alpha", "beta", "gamma", "sigma"), pyramid.streams()):
    print(f"f_{name:<5} {stream.shape}")

# ## How much work each stream gets
#
# Finer streams pass through more dilated-convolution blocks; the coarsest one
# skips self-attention entirely.

for name, (daspp, mhsa) in model.encoder.pyramid.call_counts().items():
    print(f"{name:<5} DASPP x{daspp}  MHSA x{mhsa}")

# ## Where the parameters live

sizes = Counter()
for name, p in model.named_parameters():
    sizes[".".join(name.split(".")[:2])] += p.data.size
for part, n in sizes.most_common():
    print(f"{part:<28} {n:>9,d}")
print(f"{'total':<28} {sum(sizes.values()):>9,d}")

# ## The ablation variants
#
# Removing the pyramid block drops its parameters; the depth modes add a small
# depth branch whose deepest features are concatenated onto f_sigma.

for mode in AblationMode:
    m = SaliencyModel(ModelConfig(), mode, seed=0)
    total = sum(p.data.size for _, p in m.named_parameters())
    print(f"{mode.value:<20} {total:>9,d} parameters")

# ## Output

saliency = model.predict(image.data)
print("saliency map", saliency.shape, "range", float(saliency.min()), float(saliency.max()))
