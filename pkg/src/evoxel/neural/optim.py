"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Update ``params`` in place and advance ``state``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


class Adam:
    """Adam bound to a network's parameters."""

    def __init__(self, network, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.network = network
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state = AdamState()

    def _views(self):
        params, grads = {}, {}
        for name, mod, key in self.network.named_parameters():
            params[name] = mod.params[key]
            grads[name] = mod.grads[key]
        return params, grads

    def step(self):
        params, grads = self._views()
        adam_step(params, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)
