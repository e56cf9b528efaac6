"""Inverse autoregressive flow over the non-interpretable latent ``u``.

Each step maps ``u <- delta * u + pi`` where ``(delta, pi)`` come from a
masked affine layer of the previous ``u``; output coordinate ``i`` only
sees input coordinates ``j < i``.  The Jacobian of a step is therefore
triangular with diagonal ``delta`` and its log-determinant is
``sum(log delta)``.  :class:`FlowState` carries the running density
correction so the KL term stays a valid single-sample estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    GaussianPosterior,
    NoiseSample,
    gaussian_log_density,
    reparam_sample,
    standard_normal_log_density,
)

DELTA_BIAS_INIT = 1.0


def autoregressive_mask(dim: int) -> np.ndarray:
    """mask[j, i] == 1 iff input j may feed output i (j < i)."""
    return np.triu(np.ones((dim, dim)), k=1)


@dataclass
class FlowStep:
    w_delta: Tensor
    b_delta: Tensor
    w_pi: Tensor
    b_pi: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scale: float = 0.01) -> "FlowStep":
        return cls(
            Tensor(rng.normal(0.0, scale, size=(dim, dim))),
            Tensor(np.full(dim, DELTA_BIAS_INIT)),
            Tensor(rng.normal(0.0, scale, size=(dim, dim))),
            Tensor(np.zeros(dim)),
        )

    @property
    def dim(self) -> int:
        return self.b_delta.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_delta": self.w_delta, "b_delta": self.b_delta, "w_pi": self.w_pi, "b_pi": self.b_pi}

    def __call__(self, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(delta, log_delta, pi)`` for the batch ``u``."""
        mask = Tensor.constant(autoregressive_mask(self.dim))
        pre = ad.add(ad.matmul(u, ad.mul(self.w_delta, mask)), self.b_delta)
        delta = ad.sigmoid(pre)
        # log sigmoid(x) = -softplus(-x), finite even when delta underflows
        log_delta = ad.scale(ad.softplus(ad.scale(pre, -1.0)), -1.0)
        pi = ad.add(ad.matmul(u, ad.mul(self.w_pi, mask)), self.b_pi)
        return delta, log_delta, pi


@dataclass
class FlowState:
    u: Tensor
    log_q_base: Tensor
    log_q_correction: Tensor
    t: int
    length: int


def flow_init(g: GaussianPosterior, n: NoiseSample | np.ndarray, length: int) -> FlowState:
    if length < 0:
        raise ValueError(f"flow length must be >= 0, got {length}")
    eps = n.eps if isinstance(n, NoiseSample) else np.asarray(n, dtype=np.float64)
    u0 = reparam_sample(g, eps)
    return FlowState(
        u=u0,
        log_q_base=gaussian_log_density(g, eps),
        log_q_correction=Tensor.constant(np.zeros(g.batch)),
        t=0,
        length=length,
    )


def affine_step(
    s: FlowState, delta: Tensor, pi: Tensor, log_delta: Tensor | None = None
) -> FlowState:
    if s.t >= s.length:
        raise ad.UsageError(f"flow already ran {s.t} of {s.length} steps")
    if delta.shape != s.u.shape or pi.shape != s.u.shape:
        raise ad.ShapeError("flow_step", s.u.shape, delta.shape, pi.shape)
    if log_delta is None:
        log_delta = ad.log(delta)
    u = ad.add(ad.mul(delta, s.u), pi)
    corr = ad.sub(s.log_q_correction, ad.sum(log_delta, axis=1))
    return FlowState(u, s.log_q_base, corr, s.t + 1, s.length)


def flow_step(s: FlowState, step: FlowStep) -> FlowState:
    delta, log_delta, pi = step(s.u)
    return affine_step(s, delta, pi, log_delta)


def run_flow(g: GaussianPosterior, n: NoiseSample | np.ndarray, steps: list[FlowStep]) -> FlowState:
    s = flow_init(g, n, len(steps))
    for step in steps:
        s = flow_step(s, step)
    return s


def flow_kl_u(s: FlowState) -> Tensor:
    """Single-sample estimate log q(u_T|x) - log p(u_T) per row."""
    if s.t != s.length:
        raise ad.UsageError(f"flow chain incomplete: {s.t} of {s.length} steps")
    log_q = ad.add(s.log_q_base, s.log_q_correction)
    return ad.sub(log_q, standard_normal_log_density(s.u))
