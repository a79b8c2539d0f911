"""First-order optimizers over :class:`~cdrmt.tensor.Parameter` groups."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import Parameter


class Optimizer:
    def __init__(self, groups: list[tuple[list[Parameter], float]]):
        self.groups = [(list(params), lr) for params, lr in groups]
        self.scale = 1.0

    @property
    def parameters(self) -> list[Parameter]:
        return [p for params, _ in self.groups for p in params]

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.zero_grad()

    def clip_grad_norm(self, max_norm: float | None) -> float:
        total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.parameters))
        if max_norm is not None and total > max_norm:
            k = max_norm / (total + 1e-12)
            for p in self.parameters:
                p.grad = p.grad * k
        return total

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, groups, momentum: float = 0.0):
        super().__init__(groups)
        self.momentum = momentum
        self._velocity = {id(p): np.zeros_like(p.data) for p in self.parameters}

    def step(self) -> None:
        for params, lr in self.groups:
            for p in params:
                v = self._velocity[id(p)] * self.momentum + p.grad
                self._velocity[id(p)] = v
                p.assign(p.data - lr * self.scale * v)


class Adam(Optimizer):
    def __init__(self, groups, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(groups)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for p in self.parameters}
        self._v = {id(p): np.zeros_like(p.data) for p in self.parameters}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for params, lr in self.groups:
            for p in params:
                m = self._m[id(p)] = b1 * self._m[id(p)] + (1 - b1) * p.grad
                v = self._v[id(p)] = b2 * self._v[id(p)] + (1 - b2) * p.grad * p.grad
                p.assign(p.data - lr * self.scale * (m / c1) / (np.sqrt(v / c2) + self.eps))


def make_optimizer(name: str, core: Iterable[Parameter], embed: Iterable[Parameter], lr: float, lr_embed: float):
    groups = [(list(core), lr), (list(embed), lr_embed)]
    if name == "sgd":
        return SGD(groups, momentum=0.9)
    if name == "adam":
        return Adam(groups)
    raise ValueError(f"unknown optimizer {name!r}")
