"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Apply one in-place Adam update to ``params``; returns ``state``."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError("adam_step", p.shape, grads[name].shape, detail=name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Convenience wrapper pairing a named parameter dict with an AdamState."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.002, **kw):
        self.params = params
        self.state = AdamState(lr=lr, **kw)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, clip: float | None = None) -> float:
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for k, p in self.params.items()}
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if clip is not None and norm > clip:
            grads = {k: g * (clip / norm) for k, g in grads.items()}
        adam_step(self.params, grads, self.state)
        return norm
