"""The tensor core in five minutes.

Every trainable piece of this package (temporal encoder, frequency
attention, classifier) runs on the same small reverse-mode autodiff engine.
This script builds a few graphs by hand and checks the gradients against
finite differences.
"""

import numpy as np

import afpa.tensor as T
from afpa.tensor import Tensor

# A scalar loss built from a couple of primitives.
x = Tensor([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
w = Tensor(np.eye(2), requires_grad=True)
loss = T.tensor_sum(T.mul(T.matmul(x, w), T.matmul(x, w)))
T.backward(loss)
print("loss                =", loss.item())
print("d loss / d x        =\n", x.grad)
print("d loss / d w        =\n", w.grad)

# Gradients accumulate across backward calls until zeroed.
T.backward(loss)
print("after second call   =\n", x.grad, "(doubled)")
x.zero_grad()

# grad_check compares analytic gradients with central differences.
rng = np.random.default_rng(0)
y = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
err = T.grad_check(lambda t: T.tensor_sum(T.mul(T.softmax_rows(t), t)), y)
print(f"softmax grad check  = {err:.2e} (max relative error)")

# Convolution matches an explicit sliding-window computation.
signal = Tensor(rng.standard_normal((1, 32)))
kernel = Tensor(rng.standard_normal((2, 1, 5)), requires_grad=True)
out = T.conv1d(signal, kernel, stride=2, padding=2)
print("conv1d output shape =", out.shape)
err = T.grad_check(lambda t: T.tensor_sum(T.mul(T.conv1d(signal, t, stride=2, padding=2),
                                                T.conv1d(signal, t, stride=2, padding=2))), kernel)
print(f"conv1d grad check   = {err:.2e}")
