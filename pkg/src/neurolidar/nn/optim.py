"""NAdam with the Dozat momentum schedule, plus cosine annealing."""
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import StateError


def cosine_anneal_lr(base_lr, epoch, total_epochs, lr_min=0.0):
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    e = min(max(epoch, 0), total_epochs)
    return lr_min + 0.5 * (base_lr - lr_min) * (1.0 + math.cos(math.pi * e / total_epochs))


@dataclass
class OptimizerState:
    base_lr: float
    lr: float = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum_decay: float = 0.004
    step: int = 0
    mu_product: float = 1.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=lambda: {"kind": "cosine", "total_epochs": 1,
                                                    "lr_min": 0.0})

    def __post_init__(self):
        if self.lr is None:
            self.lr = self.base_lr


class NAdam:
    def __init__(self, parameters, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 momentum_decay=0.004, total_epochs=1):
        self.params = list(parameters)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.state = OptimizerState(lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    momentum_decay=momentum_decay)
        self.state.schedule["total_epochs"] = total_epochs
        for p in self.params:
            self.state.m[p.name] = np.zeros_like(p.data)
            self.state.v[p.name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def set_epoch(self, epoch):
        sch = self.state.schedule
        self.state.lr = cosine_anneal_lr(self.state.base_lr, epoch, sch["total_epochs"],
                                         sch["lr_min"])
        return self.state.lr

    def step(self):
        missing = [p.name for p in self.params if p.grad is None]
        if missing:
            raise StateError(f"no gradient for {missing[0]!r}; run backward first")
        nadam_step(self.state, self.params)


def nadam_step(state, params):
    st = state
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    mu = b1 * (1.0 - 0.5 * 0.96 ** (st.step * st.momentum_decay))
    mu_next = b1 * (1.0 - 0.5 * 0.96 ** ((st.step + 1) * st.momentum_decay))
    st.mu_product *= mu
    bc2 = 1.0 - b2 ** st.step
    c_grad = st.lr * (1.0 - mu) / (1.0 - st.mu_product)
    c_mom = st.lr * mu_next / (1.0 - st.mu_product * mu_next)
    for p in params:
        if p.grad is None:
            raise StateError(f"no gradient for {p.name!r}")
        g = p.grad
        m = st.m[p.name]
        v = st.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / bc2) + st.eps
        p.data -= (c_grad * g / denom + c_mom * m / denom).astype(p.dtype)
