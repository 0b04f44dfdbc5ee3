# # A tour of the autodiff core
#
# Everything in the package is built on `Tensor`, a thin wrapper around a numpy
# array that records how it was computed. Calling `backward()` on a scalar walks
# that record in reverse and fills in `.grad` on every leaf that asked for one.

import numpy as np

from pyrasal import Tensor, gradcheck
from pyrasal import functional as F
from pyrasal.tensor import softmax

# ## A first gradient
#
# f(x) = sum(x^2) has gradient 2x.

x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
f = (x * x).sum()
f.backward()
print("f =", f.item())
print("df/dx =", x.grad)

# ## Convolution, resize and softmax
#
# The image ops carry their own backward rules. A 3x3 all-ones kernel over an
# all-ones image with zero padding counts the in-bounds neighbours of each pixel.

img = Tensor(np.ones((1, 1, 4, 4)), dtype=np.float64)
kernel = Tensor(np.ones((1, 1, 3, 3)), dtype=np.float64)
print(F.conv2d(img, kernel, padding=1).data[0, 0])

# Bilinear resizing uses half-pixel centres, so doubling a 2x2 ramp keeps its
# edge values and interpolates in between.
ramp = Tensor(np.array([[[[0.0, 1.0], [1.0, 2.0]]]]), dtype=np.float64)
print(F.upsample_bilinear(ramp, 4, 4).data[0, 0])

print(softmax(Tensor(np.array([0.0, np.log(2.0)]), dtype=np.float64)).data)

# ## Checking the backward rules
#
# `gradcheck.run` compares every analytic gradient against central finite
# differences in float64. Here we run a handful of cases; the full list takes
# about a minute and a half and also covers the whole network end to end.

results = gradcheck.run(["matmul", "softmax", "conv2d", "upsample_bilinear", "batchnorm2d_train"])
print(gradcheck.format_table(results))
