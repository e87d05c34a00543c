"""Central finite-difference checks for scalar functions of Tensors."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def numeric_grad(fn, arrays, h=1e-5):
    """d fn / d arrays[i] by central differences; ``fn`` maps ndarrays to a float."""
    arrays = [np.array(a, dtype=np.float64, order="C") for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up = fn(*arrays)
            flat[j] = keep - h
            down = fn(*arrays)
            flat[j] = keep
            gflat[j] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grad(build_loss, arrays):
    leaves = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build_loss(*leaves)
    ad.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


def max_relative_error(a, b, floor=1e-4):
    """Elementwise |a-b| / (|a|+|b|), with the denominator floored.

    Central differences at h=1e-5 carry roughly 1e-11 of rounding noise, so
    entries far below the floor are judged on absolute error instead.
    """
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))


def check(build_loss, arrays, h=1e-5):
    """Largest relative error between backprop and central differences over every input."""
    num = numeric_grad(lambda *xs: build_loss(*[ad.Tensor(x) for x in xs]).item(), arrays, h)
    ana = analytic_grad(build_loss, arrays)
    return max(max_relative_error(x, y) for x, y in zip(ana, num))
