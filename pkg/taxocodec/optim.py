"""
optim.py
First-order optimizers over ``Parameter`` lists
"""

from typing import Iterable, List

import numpy as np

from .numerics import Parameter


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        # Parameters frozen at construction time are never updated by this optimizer.
        self.params: List[Parameter] = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.trainable:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    for p in params:
        if p.trainable and p.grad is not None:
            p.data -= (lr * p.grad).astype(p.dtype, copy=False)
