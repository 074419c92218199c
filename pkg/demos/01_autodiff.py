"""
Reverse-mode autodiff in a few lines
====================================

Tensors record the operations that made them; ``backward`` walks that
record in reverse and leaves gradients on the leaves.
"""
import numpy as np

from cloudcam import tensor as T
from cloudcam.tensor import Tensor

x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
y = T.sum_(T.mul(x, x))          # y = sum(x^2)
T.backward(y)
print("y      =", y.item())
print("dy/dx  =", x.grad)        # 2x

# Reusing a tensor k times accumulates k contributions.
x.zero_grad()
z = T.sum_(T.add(T.add(x, x), x))
T.backward(z)
print("d(3x)/dx =", x.grad)

# Check any scalar function against central differences.
rng = np.random.default_rng(0)
a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)


def f(t):
    return T.sum_(T.sigmoid(T.mul(t, t)))


T.backward(f(a))
numeric = T.finite_diff_grad(f, a)
print("max relative error vs finite differences:", T.relative_error(a.grad, numeric))

# Inside no_grad nothing is recorded, which is how inference runs.
with T.no_grad():
    w = T.mul(a, a)
print("graph recorded under no_grad:", w.requires_grad)
