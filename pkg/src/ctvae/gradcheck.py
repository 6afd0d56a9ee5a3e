"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad


class NonFiniteLoss(FloatingPointError):
    pass


def grad_check(build_loss: Callable[[], Tensor], params: Mapping[str, Tensor] | list[Tensor],
               h: float = 1e-5) -> float:
    """Return the worst relative error between backprop and central differences.

    ``build_loss`` must rebuild the scalar loss from the current values of
    ``params`` and be deterministic.  The error for each entry is
    ``|a - d| / (|a| + |d| + 1e-12)``.  Run it with float64 parameters;
    float32 round-off swamps an ``h`` of 1e-5.
    """
    if not isinstance(params, Mapping):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            # probes only need values, so skip graph construction
            with no_grad():
                flat[i] = orig + h
                up = float(build_loss().data)
                flat[i] = orig - h
                down = float(build_loss().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteLoss(f"loss not finite while probing {name}[{i}]")
            numeric = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
