"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None = None) -> None:
    """Apply one Adam update in place.

    ``grads`` defaults to each parameter's accumulated ``.grad``.  All
    gradients are validated before any parameter is touched, so a
    non-finite entry leaves the model and the moments unchanged.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr_t = state.lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name!r} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr_t * m / (np.sqrt(v) + state.eps * np.sqrt(1.0 - b2**t))).astype(p.data.dtype)


class Adam:
    """Thin stateful wrapper binding an :class:`AdamState` to named parameters."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.state, self.params)
