"""
Reverse-mode autodiff on numpy
==============================

Every layer in the package is built from a small set of fp64 ops, each
with a hand-written vector-Jacobian product.  ``gradcheck`` compares the
analytic gradient against central finite differences.
"""

import numpy as np

from lail import tensor as T
from lail.gradcheck import gradcheck
from lail.tensor import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)

###############################################################################
# A small composite: layer norm, a matmul and a log-softmax.

def loss():
    h = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
    return -T.log_softmax(h @ w)[:, 0].sum()

loss().backward()
print("dL/dw =\n", w.grad.round(3))
print("worst relative error vs finite differences:", gradcheck(loss, [x, w]))

###############################################################################
# Causal masking and padding go through ``where``; masked positions get no
# gradient at all.

mask = np.tril(np.ones((4, 6), dtype=bool))
x.grad = None
T.where(mask, x, 0.0).sum().backward()
print("gradient is zero exactly where masked:", np.array_equal(x.grad == 0, ~mask))
