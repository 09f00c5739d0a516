"""
The tensor engine: forward ops, backward pass, finite-difference checks
=======================================================================

Everything in this package sits on a small float32 tensor type with
reverse-mode automatic differentiation.  This script builds a few graphs,
runs backward, and verifies one gradient against central differences.
"""

import numpy as np

from autocell import tensor as T
from autocell.tensor import Tensor, backward

# A scalar chain: y = sum((x * x + x)) has gradient 2x + 1.
x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
y = T.tsum(x * x + x)
backward(y)
print("dy/dx =", x.grad, "(expect 2x+1 =", 2 * x.data + 1, ")")

# The same machinery drives convolution.  A centered delta kernel is the
# identity, so its output reproduces the input exactly.
rng = np.random.default_rng(0)
img = Tensor(rng.normal(size=(5, 5, 1)).astype(np.float32))
delta = np.zeros((3, 3, 1, 1), dtype=np.float32)
delta[1, 1, 0, 0] = 1.0
out = T.conv2d(img, Tensor(delta))
print("conv with delta kernel is identity:", np.allclose(out.data, img.data))

# Temperature-controlled softmax: low temperature sharpens toward argmax.
logits = Tensor([1.0, 2.0, 0.5])
for temp in (2.0, 1.0, 0.1):
    print(f"softmax_t(T={temp}):", np.round(T.softmax_t(logits, temp).data, 4))

# Check one convolution gradient against central finite differences.
k = Tensor(rng.normal(scale=0.5, size=(3, 3, 1, 2)).astype(np.float32),
           requires_grad=True)
w = Tensor(rng.normal(size=(5, 5, 2)).astype(np.float32))


def loss_value():
    return T.tsum(T.conv2d(img, k) * w).item()


loss = T.tsum(T.conv2d(img, k) * w)
backward(loss)
h = 1e-3
i = (1, 2, 0, 1)  # an arbitrary kernel coordinate
keep = k.data[i]
k.data[i] = keep + h
up = loss_value()
k.data[i] = keep - h
down = loss_value()
k.data[i] = keep
fd = (up - down) / (2 * h)
print(f"kernel grad at {i}: analytic {k.grad[i]:.6f}, fd {fd:.6f}")
