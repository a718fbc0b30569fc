"""
A tour of the tape
==================

Operations record themselves on the active tape; ``backward`` walks the
record in reverse and leaves gradients on every parameter.  Finite
differences provide the reference.
"""

import numpy as np

from featenhancer import tensor as T
from featenhancer.gradcheck import finite_diff_grad, relative_error
from featenhancer.tensor import ConvSpec, Tape, Tensor

rng = np.random.default_rng(0)

# %% a 3x3 convolution of ones over a 3x3 image of ones
x = Tensor(np.ones((1, 3, 3)))
out = T.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), ConvSpec(1, 1, 3))
print("window sums:\n", out.data[0])

# %% two convolutions, a ReLU and a squared loss
spec1, spec2 = ConvSpec(4, 3, 3), ConvSpec(2, 4, 3, stride=2)
w1 = Tensor(rng.normal(size=spec1.weight_shape) * 0.3, requires_grad=True)
b1 = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)
w2 = Tensor(rng.normal(size=spec2.weight_shape) * 0.3, requires_grad=True)
b2 = Tensor(np.zeros(2), requires_grad=True)
image = Tensor(rng.random((3, 8, 8)))


def loss_fn():
    h = T.relu(T.conv2d(image, w1, b1, spec1))
    y = T.conv2d(h, w2, b2, spec2)
    return T.sum_all(T.mul(y, y))


with Tape() as tape:
    loss = loss_fn()
print(f"loss = {loss.item():.6f}, recorded nodes = {len(tape)}")
tape.backward(loss)

numeric = finite_diff_grad(lambda: loss_fn().item(), [w1, b1, w2, b2])
for name, p, n in zip(("w1", "b1", "w2", "b2"), (w1, b1, w2, b2), numeric):
    print(f"{name}: relative error {relative_error(p.grad, n):.2e}")

# %% bilinear upsampling with half-pixel centres
row = T.bilinear_upsample(Tensor(np.array([[[1.0, 3.0]]])), 1, 4)
print("upsampled [1, 3]:", row.data.ravel())
