import numpy as np

from . import autodiff as ad


class SGD:
    """Heavy-ball SGD; parameters whose grad is None are left untouched."""

    def __init__(self, params, lr=0.05, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            buf = self.buffers.get(i)
            buf = p.grad.copy() if buf is None else self.momentum * buf + p.grad
            self.buffers[i] = buf
            p.data = p.data - self.lr * buf

    def reset(self):
        self.buffers = {}


def minibatches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def fit(model, x, y, loss_fn, rng, epochs=5, lr=0.05, momentum=0.9, batch_size=64):
    """Plain supervised training loop used for oracle pre-training."""
    opt = SGD(model.parameters(), lr, momentum)
    for _ in range(epochs):
        for idx in minibatches(rng, len(y), batch_size):
            opt.zero_grad()
            loss = loss_fn(model(x[idx]), y[idx])
            ad.backward(loss)
            opt.step()
    return model


def predict_logits(model, x, batch_size=512):
    """Forward without recording a graph."""
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        out = [model(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
    return np.concatenate(out) if out else np.zeros((0,))
