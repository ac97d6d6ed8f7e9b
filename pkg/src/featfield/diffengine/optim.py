"""Adam with standard bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from featfield.diffengine.tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Update ``params`` in place. Parameters with no gradient entry are skipped."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad for {name} has shape {g.shape}, param has {p.shape}")
        dt = p.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (beta1 * m + (1 - beta1) * g).astype(dt, copy=False)
        v = (beta2 * v + (1 - beta2) * g * g).astype(dt, copy=False)
        state.m[name], state.v[name] = m, v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - upd).astype(dt, copy=False)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self.params.items()
        }
        adam_step(self.params, grads, self.state, self.lr)
