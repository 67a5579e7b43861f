"""
Autodiff engine and the clustering mutual information
=====================================================

A tour of the numpy reverse-mode engine that everything else is built on,
followed by the mutual-information objective that drives adaptation.

Run with ``python3 demos/01_autodiff_and_mi.py``.
"""

import numpy as np

from frla.losses import joint_distribution, mi
from frla.tensor import Tensor, backward, finite_difference_check, matmul, softmax_axis, tsum

rng = np.random.default_rng(0)

###############################################################################
# Tensors record the operations applied to them; ``backward`` walks the
# record in reverse and fills ``.grad`` on every leaf that asked for one.

w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 4)))
y = tsum(softmax_axis(matmul(x, w)) * softmax_axis(matmul(x, w)))
backward(y)
print("loss", round(y.item(), 6))
print("dL/dw\n", np.round(w.grad, 4))

###############################################################################
# Every gradient can be checked against central differences.  The check
# reports the worst relative error over all entries of the leaf.

def f(t):
    s = softmax_axis(matmul(x, t))
    return tsum(s * s)


err = finite_difference_check(f, w)
print("finite-difference relative error", f"{err:.1e}")

###############################################################################
# Mutual information between two streams of class probabilities.  Two
# confident streams that agree carry log(K) nats; unrelated ones carry none.

K = 3
labels = rng.integers(0, K, 300)
sharp = np.eye(K)[labels] * 0.97 + 0.01
print("agreeing streams   ", round(mi(sharp, sharp).item(), 4), "of", round(np.log(K), 4))
print("shuffled partner   ", round(mi(sharp, sharp[rng.permutation(300)]).item(), 4))
print("uniform both sides ", round(mi(np.full((300, K), 1 / K), np.full((300, K), 1 / K)).item(), 4))

###############################################################################
# Maximising it rewards predictions that are individually confident but
# spread evenly over the classes: collapsing onto one class scores zero.

collapsed = np.tile([0.98, 0.01, 0.01], (300, 1))
print("collapsed          ", round(mi(collapsed, collapsed).item(), 4))
print("joint of the agreeing pair\n", np.round(joint_distribution(sharp, sharp).joint.data, 3))
