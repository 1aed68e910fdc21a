"""Tour of the tensor core: forward ops, backward pass, gradient checking,
and a few Adam steps on a quadratic bowl."""

import numpy as np

from wclgen import AdamState, Tensor, adam_step, backward, grad_check, matmul, softmax

# forward arithmetic records a tape
a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
b = Tensor([[5.0, 6.0], [7.0, 8.0]])
product = matmul(a, b)
print("a @ b =\n", product.data)

probs = softmax(Tensor([np.log(2.0), 0.0]))
print("softmax([ln 2, 0]) =", probs.data, "(thirds, exactly)")

# backward populates grads on every requires_grad leaf
loss = (a * a).sum()
backward(loss)
print("d/da sum(a^2) =\n", a.grad, "(= 2a)")

# finite differences agree with the tape
x = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
err = grad_check(lambda t: (t * t * t).sum(), x)
print(f"grad_check max relative error on sum(x^3): {err:.2e}")

# Adam walks a quadratic bowl downhill
theta = {"w": Tensor(np.array([5.0, -3.0]), requires_grad=True)}
state = AdamState(lr=0.1)
for step in range(200):
    grad = 2.0 * theta["w"].data
    adam_step(theta, {"w": grad}, state)
print("after 200 Adam steps argmin of ||w||^2:", np.round(theta["w"].data, 4))
