"""
Reverse-mode autodiff and finite-difference checks
==================================================

Builds a tiny conv + batchnorm + relu block by hand, backpropagates a scalar
through it and compares every gradient to central differences.
"""

import numpy as np

from bevdistill.gradsuite import run_suite
from bevdistill.numerics import Tensor, backward, batchnorm, check_gradients, conv2d, ops, relu

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 3, 6, 6)))
w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
gamma = Tensor(np.ones(4), requires_grad=True)
beta = Tensor(np.zeros(4), requires_grad=True)


def block():
    y = relu(batchnorm(conv2d(x, w, b, padding=1), gamma, beta))
    return ops.mean(ops.mul(y, y))


loss = block()
backward(loss)
print(f"loss = {loss.item():.6f}")
print(f"|dL/dw| = {np.linalg.norm(w.grad):.6f}, |dL/dgamma| = {np.linalg.norm(gamma.grad):.6f}")

res = check_gradients(block, [w, b, gamma, beta], max_coords=40, rng=rng)
print(f"finite differences over {res.checked} coordinates: max relative error {res.max_rel_error:.2e}")

print("\nThe packaged suite checks every op and loss on 20 random fixtures each:")
for r in run_suite(seed=7, fixtures=20, names=["op.conv2d", "loss.msfd", "loss.reld", "loss.qfl"]):
    print(f"  {r.name:12s} max rel err {r.max_rel_error:.2e}  ({r.seconds:.2f} s)")
