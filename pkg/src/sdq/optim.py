"""First-order optimizers and learning-rate schedules over Tensor parameters."""
from __future__ import annotations

import math

import numpy as np

from .gradcore import ContractError


class Optimizer:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr
        self.base_lr = lr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, buf in zip(self.params, self._buf):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= self.lr * buf


class Adam(Optimizer):
    """Adam; ``decoupled=True`` gives AdamW weight decay."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 decoupled=False):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and self.decoupled:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params, lr: float, weight_decay: float = 0.0) -> Optimizer:
    name = name.lower()
    if name == "sgd":
        return SGD(params, lr, weight_decay=weight_decay)
    if name == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    if name == "adamw":
        return Adam(params, lr, weight_decay=weight_decay, decoupled=True)
    raise ContractError(f"unknown optimizer {name!r}")


def scheduled_lr(base: float, schedule: str, epoch: int, epochs: int,
                 milestones=(), gamma: float = 0.1) -> float:
    """Learning rate for 0-based ``epoch``: constant, cosine or multistep."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return 0.5 * base * (1 + math.cos(math.pi * epoch / max(1, epochs)))
    if schedule == "multistep":
        return base * gamma ** sum(epoch >= m for m in milestones)
    raise ContractError(f"unknown lr schedule {schedule!r}")
