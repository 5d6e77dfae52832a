"""
Reverse-mode gradients on numpy arrays
======================================

A tiny two-layer regression, differentiated by hand-built graph nodes and
checked against central differences.
"""

import numpy as np

import fusedit.tensor as T
from fusedit.gradcheck import finite_diff_check

rng = np.random.default_rng(0)
x = T.Tensor(rng.normal(size=(8, 3)))
w1 = T.Tensor(rng.normal(size=(3, 16)), requires_grad=True)
w2 = T.Tensor(rng.normal(size=(16, 1)), requires_grad=True)
y = rng.normal(size=(8, 1))

###############################################################################
# Forward is ordinary expression building; ``backward`` walks the recorded
# nodes in reverse creation order.


def loss_fn(w):
    h = T.silu(T.matmul(x, w))
    return T.mean(T.square(T.matmul(h, w2) - y))


loss = loss_fn(w1)
loss.backward()
print("loss", loss.item())
print("grad norm of w1", np.linalg.norm(w1.grad))

###############################################################################
# The same gradient from central differences, eps = 1e-5.

print("max relative error", finite_diff_check(loss_fn, w1))

###############################################################################
# ``no_grad`` builds no graph, so nothing can be back-propagated.

with T.no_grad():
    frozen = loss_fn(w1)
print("recorded a graph:", frozen.requires_grad)
