"""Adaptive-moment optimiser with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DiffArray


@dataclass
class ParamGroup:
    params: list[DiffArray]
    lr: float
    weight_decay: float = 0.01


@dataclass
class AdamW:
    groups: list[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.zero_grad()

    def step(self, lr_scale: float = 1.0) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for group in self.groups:
            lr = group.lr * lr_scale
            for p in group.params:
                if p.grad is None:
                    continue
                key = id(p)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(p.values)
                    self._v[key] = np.zeros_like(p.values)
                v = self._v[key]
                g = p.grad
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                if group.weight_decay:
                    p.values *= 1.0 - lr * group.weight_decay
                p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
