"""Posterior families, reconstruction likelihoods and their KL terms.

The priors are fixed: ``p(u) = N(0, I)`` and ``p(v)`` uniform over the K
classes, so ``KL(q(v|x) || p(v)) = log K - H(q(v|x))``.  Per-example
quantities are returned as 1-D tensors of length ``batch``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    pass


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian ``q(u|x)``; ``log_sigma`` is kept when known so the
    KL does not have to take ``log(sigma)`` again."""

    mu: Tensor
    sigma: Tensor
    log_sigma: Tensor | None = None

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ad.ShapeError("GaussianPosterior", self.mu.shape, self.sigma.shape)

    @classmethod
    def from_log_var(cls, mu: Tensor, log_var: Tensor) -> "GaussianPosterior":
        log_sigma = ad.scale(log_var, 0.5)
        return cls(mu, ad.exp(log_sigma), log_sigma)

    @property
    def batch(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


@dataclass
class CategoricalPosterior:
    logits: Tensor
    probs: Tensor
    log_probs: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> "CategoricalPosterior":
        return cls(logits, ad.softmax_rows(logits), ad.log_softmax_rows(logits))

    @property
    def k(self) -> int:
        return self.logits.shape[1]


@dataclass
class NoiseSample:
    """Standard-normal draws plus the generator state that produced them."""

    eps: np.ndarray
    seed_state: dict[str, Any]

    @classmethod
    def draw(cls, rng: np.random.Generator, shape: tuple[int, int]) -> "NoiseSample":
        state = rng.bit_generator.state
        return cls(rng.standard_normal(shape), state)

    def regenerate(self) -> np.ndarray:
        bitgen = getattr(np.random, self.seed_state["bit_generator"])()
        bitgen.state = self.seed_state
        return np.random.Generator(bitgen).standard_normal(self.eps.shape)


def reparam_sample(g: GaussianPosterior, n: NoiseSample | np.ndarray) -> Tensor:
    """``mu + sigma * eps`` with eps held constant."""
    eps = n.eps if isinstance(n, NoiseSample) else np.asarray(n, dtype=np.float64)
    if eps.shape != g.mu.shape:
        raise ad.ShapeError("reparam_sample", g.mu.shape, eps.shape)
    return ad.add(g.mu, ad.mul(g.sigma, Tensor.constant(eps)))


def _log_sigma(g: GaussianPosterior) -> Tensor:
    if np.any(g.sigma.data <= 0):
        raise DomainError("sigma must be strictly positive")
    return g.log_sigma if g.log_sigma is not None else ad.log(g.sigma)


def gaussian_kl_standard(g: GaussianPosterior) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) per row."""
    log_sigma = _log_sigma(g)
    inner = ad.sub(
        ad.sub(ad.add(ad.scale(log_sigma, 2.0), 1.0), ad.mul(g.mu, g.mu)),
        ad.mul(g.sigma, g.sigma),
    )
    return ad.scale(ad.sum(inner, axis=1), -0.5)


def gaussian_log_density(g: GaussianPosterior, eps: np.ndarray) -> Tensor:
    """log q(mu + sigma*eps | x) per row, written in terms of eps."""
    log_sigma = _log_sigma(g)
    const = -0.5 * (LOG_2PI + np.asarray(eps) ** 2)
    return ad.sum(ad.sub(Tensor.constant(const), log_sigma), axis=1)


def standard_normal_log_density(u: Tensor) -> Tensor:
    return ad.scale(ad.sum(ad.add(ad.mul(u, u), LOG_2PI), axis=1), -0.5)


def categorical_entropy(c: CategoricalPosterior) -> Tensor:
    return ad.scale(ad.sum(ad.mul(c.probs, c.log_probs), axis=1), -1.0)


def categorical_kl_uniform(c: CategoricalPosterior) -> Tensor:
    # log K - H, written as sum p log p + log K
    return ad.add(ad.sum(ad.mul(c.probs, c.log_probs), axis=1), math.log(c.k))


def check_one_hot(y: np.ndarray, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != k:
        raise ValueError(f"labels must be a (batch, {k}) one-hot matrix, got shape {y.shape}")
    ok = np.all((y == 0.0) | (y == 1.0), axis=1) & (y.sum(axis=1) == 1.0)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise ValueError(f"label row {bad} is not one-hot")
    return y


def cross_entropy_constraint(c: CategoricalPosterior, y: np.ndarray) -> Tensor:
    """sum_i y_i log q(v_i|x) per row (nonpositive)."""
    y = check_one_hot(y, c.k)
    return ad.sum(ad.mul(c.log_probs, Tensor.constant(y)), axis=1)


def _check_unit_interval(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    return x


def bernoulli_recon_loglik(logits: Tensor, x: np.ndarray) -> Tensor:
    """sum over pixels of x log s(l) + (1-x) log(1-s(l)) = x*l - softplus(l)."""
    x = _check_unit_interval(x)
    if x.shape != logits.shape:
        raise ad.ShapeError("bernoulli_recon_loglik", logits.shape, x.shape)
    return ad.sum(ad.sub(ad.mul(logits, Tensor.constant(x)), ad.softplus(logits)), axis=1)


def gaussian_recon_loglik(means: Tensor, x: np.ndarray) -> Tensor:
    """Unit-variance Gaussian log-likelihood per row, for continuous inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != means.shape:
        raise ad.ShapeError("gaussian_recon_loglik", means.shape, x.shape)
    diff = ad.sub(means, Tensor.constant(x))
    return ad.scale(ad.sum(ad.add(ad.mul(diff, diff), LOG_2PI), axis=1), -0.5)
