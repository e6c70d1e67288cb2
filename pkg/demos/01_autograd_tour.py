"""
A short tour of the tensor engine
=================================

Tensors wrap numpy arrays. Every op records its parents and a closure that
maps the output gradient to input gradients; ``backward`` walks the graph
in reverse topological order.
"""

import numpy as np

from fewshot_ssl import tensor as T

# a 2x2 linear map and its gradient
x = T.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
w = T.Tensor([[0.5, -1.0], [2.0, 0.0]], requires_grad=True)
loss = T.sum(T.relu(x @ w))
loss.backward()
print("loss", loss.item())
print("dL/dx\n", x.grad)
print("dL/dw\n", w.grad)

# the graph is consumed by backward; ask for retain_graph to run it twice
x.zero_grad()
y = T.sum(x * x)
y.backward(retain_graph=True)
y.backward()
print("two passes accumulate 2 * 2x\n", x.grad)

# finite differences agree with the analytic gradient (in float64)
with T.default_dtype(np.float64):
    rng = np.random.default_rng(0)
    imgs = T.Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    kern = T.Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    probe = rng.standard_normal((2, 4, 3, 3))

    def f():
        return T.sum(T.max_pool2d(T.conv2d(imgs, kern, padding=1), 2) * T.Tensor(probe))

    f().backward()
    h = 1e-5
    kern.data[1, 2, 0, 1] += h
    hi = f().item()
    kern.data[1, 2, 0, 1] -= 2 * h
    lo = f().item()
    kern.data[1, 2, 0, 1] += h
    print("analytic", kern.grad[1, 2, 0, 1], "numeric", (hi - lo) / (2 * h))

# gradients stop at no_grad; this is how the BYOL target branch is run
with T.no_grad():
    z = x * 3.0
print("recorded under no_grad:", z.requires_grad)
