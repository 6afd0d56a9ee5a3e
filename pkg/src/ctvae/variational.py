"""Diagonal-Gaussian latent machinery: KL terms, reparameterised sampling, KL annealing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class GaussianParams:
    """Diagonal Gaussian as ``mu`` and ``logvar`` tensors of shape ``[..., D]``."""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        self.mu, self.logvar = T.as_tensor(self.mu), T.as_tensor(self.logvar)
        if self.mu.shape != self.logvar.shape:
            raise ShapeError("gaussian", self.mu.shape, self.logvar.shape)

    @classmethod
    def split(cls, stats: Tensor) -> "GaussianParams":
        """Build from a ``[..., 2D]`` network output: first half mean, second half log-variance."""
        d = stats.shape[-1] // 2
        return cls(stats[..., :d], stats[..., d:])

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def check_finite(self):
        if not (np.all(np.isfinite(self.mu.data)) and np.all(np.isfinite(self.logvar.data))):
            raise FloatingPointError("non-finite Gaussian parameters")


def kl_vs_standard(q: GaussianParams) -> Tensor:
    """KL(q || N(0, I)) summed over the last axis."""
    q.check_finite()
    # expm1(v) >= v holds in floating point too, so every term stays non-negative
    terms = (T.expm1(q.logvar) - q.logvar) + q.mu * q.mu
    return T.sum_(terms, axis=-1) * 0.5


def kl_pair(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise ShapeError("kl_pair", q.mu.shape, p.mu.shape)
    q.check_finite()
    p.check_finite()
    diff = q.mu - p.mu
    d = q.logvar - p.logvar
    terms = (T.expm1(d) - d) + diff * diff * T.exp(-p.logvar)
    return T.sum_(terms, axis=-1) * 0.5


def reparameterize(g: GaussianParams, eps) -> Tensor:
    """``mu + exp(logvar / 2) * eps``, differentiable in mu and logvar."""
    eps = T.as_tensor(eps)
    if eps.shape != g.mu.shape:
        raise ShapeError("reparameterize", g.mu.shape, eps.shape)
    return g.mu + T.exp(g.logvar * 0.5) * eps


@dataclass
class AnnealSchedule:
    """KL weight schedule.

    The weight is 0 for the first ``pretrain_steps`` steps, rises linearly
    to 1 over ``ramp_steps`` and stays there.  ``kld_period`` controls how
    often the KL term is optimised at all; ``mode`` picks how that is done
    (``"masked"``: KL added to the loss only on every k-th step;
    ``"separate"``: an extra KL-only update on every k-th step).
    """

    pretrain_steps: int = 0
    ramp_steps: int = 5000
    kld_period: int = 3
    mode: str = "masked"
    fixed_weight: float | None = None

    def __post_init__(self):
        if self.pretrain_steps < 0 or self.ramp_steps < 1 or self.kld_period < 1:
            raise ValueError("need pretrain_steps >= 0, ramp_steps >= 1, kld_period >= 1")
        if self.mode not in ("masked", "separate"):
            raise ValueError(f"unknown KL schedule mode {self.mode!r}")

    def kl_active(self, step: int) -> bool:
        return step % self.kld_period == 0


def kl_weight(step: int, s: AnnealSchedule) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if s.fixed_weight is not None:
        return float(s.fixed_weight)
    if step < s.pretrain_steps:
        return 0.0
    return min(1.0, (step - s.pretrain_steps) / s.ramp_steps)

