"""
Gradients and distillation losses by hand
=========================================

Build a few tensors, push them through the loss functions and compare
backprop with central differences.
"""

import numpy as np

from fedhelp import autodiff as ad
from fedhelp import losses as L
from fedhelp.gradcheck import check
from fedhelp.rng import Rng

rng = Rng("demo-losses")

# logits for a batch of four, six classes
z = ad.Tensor(rng.normal((4, 6)), requires_grad=True)
labels = np.array([0, 3, 5, 1])

loss = L.cross_entropy(z, labels)
ad.backward(loss)
print("cross entropy", round(loss.item(), 4))
print("d loss / d z, first row", np.round(z.grad[0], 4))

# the same gradient from central differences
print("max rel err vs finite differences", check(lambda t: L.cross_entropy(t, labels), [z.data]))

# a proxy model's logits pick the top classes the large model is pushed toward
proxy = rng.normal((4, 6))
omega = L.top_omega(proxy, 3)
print("top-3 classes per row\n", omega)
print("ranking KD", round(L.ranking_kd(z.data, omega).item(), 4))

# with one class the ranking loss is plain CE on the proxy's argmax
one = L.ranking_kd(z.data, L.top_omega(proxy, 1)).item()
ce = L.cross_entropy(z.data, proxy.argmax(axis=1)).item()
print("rank-1 KD vs CE:", one, ce)

# forward KD stops the teacher: only the student receives a gradient
teacher = ad.Tensor(proxy, requires_grad=True)
student = ad.Tensor(z.data, requires_grad=True)
ad.backward(L.forward_kd(teacher, student))
print("teacher grad:", teacher.grad, "| student grad norm:", round(float(np.linalg.norm(student.grad)), 4))
