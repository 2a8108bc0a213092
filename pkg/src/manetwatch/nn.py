"""Tiny tanh MLP with hand-written backprop, and an Adam optimiser."""

from __future__ import annotations

import numpy as np


class MLP:
    """Feed-forward net: tanh hidden layers, linear output.

    Parameters live in ``self.params`` as [W0, b0, W1, b1, ...] with W of shape
    (fan_in, fan_out), so a batch is processed as ``x @ W + b``.
    """

    def __init__(self, sizes, rng=None, out_scale=1.0):
        self.sizes = tuple(int(s) for s in sizes)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = []
        n_layers = len(self.sizes) - 1
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = np.sqrt(1.0 / a) * (out_scale if i == n_layers - 1 else 1.0)
            self.params.append(rng.normal(0.0, scale, size=(a, b)))
            self.params.append(np.zeros(b))

    @property
    def shapes(self):
        return [p.shape for p in self.params]

    def copy(self) -> "MLP":
        net = MLP.__new__(MLP)
        net.sizes = self.sizes
        net.params = [p.copy() for p in self.params]
        return net

    def forward(self, x, keep=False):
        h = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [h]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            h = np.tanh(z) if i < n_layers - 1 else z
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts, dout):
        """Gradients of sum(dout * output) w.r.t. every parameter."""
        grads = [None] * len(self.params)
        n_layers = len(self.params) // 2
        g = dout
        for i in reversed(range(n_layers)):
            if i < n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[2 * i].T
        return grads

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """In-place update of ``params``.  A zero learning rate leaves them untouched."""
        self.t += 1
        if self.lr == 0:
            return
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
