"""Finite-difference checks for every primitive and every objective.

The objective checks run on a tiny instance (4 pixels, K=2, dim_u=2) with
all randomness pinned: Gaussian noise, dropout masks, the drawn class and
the stop-gradient reward and baseline of the SDVAE-II surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainingConfig
from .model import (
    Batch,
    FrozenSample,
    draw_noise,
    elbo_terms,
    init_params,
    sdvae1_loss,
    sdvae2_loss,
    unlabeled_loss,
)

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    trials: int = 1

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _weighted(op: Callable[..., Tensor], weight: np.ndarray) -> Callable[..., Tensor]:
    """sum(op(...) * W) with a fixed random W, so every output coordinate counts."""
    w = Tensor.constant(weight)
    return lambda *xs: ad.sum(ad.mul(op(*xs), w))


def primitive_cases(rng: np.random.Generator):
    """Yield ``(name, f, points, skip)`` for one random draw of each primitive."""
    n, m, p = rng.integers(1, 5, size=3)
    normal = lambda *shape: Tensor(rng.normal(size=shape))  # noqa: E731
    out = lambda *shape: rng.normal(size=shape)  # noqa: E731

    yield "matmul", _weighted(ad.matmul, out(n, p)), [normal(n, m), normal(m, p)], None
    yield "add", _weighted(ad.add, out(n, m)), [normal(n, m), normal(n, m)], None
    yield "add-row", _weighted(ad.add, out(n, m)), [normal(n, m), normal(m)], None
    yield "sub", _weighted(ad.sub, out(n, m)), [normal(n, m), normal(n, m)], None
    yield "sub-row", _weighted(ad.sub, out(n, m)), [normal(n, m), normal(m)], None
    yield "mul", _weighted(ad.mul, out(n, m)), [normal(n, m), normal(n, m)], None
    c = float(rng.normal())
    yield "scale", _weighted(lambda a: ad.scale(a, c), out(n, m)), [normal(n, m)], None
    for name in ("sigmoid", "tanh", "exp", "softplus"):
        yield name, _weighted(getattr(ad, name), out(n, m)), [normal(n, m)], None
    yield (
        "relu",
        _weighted(ad.relu, out(n, m)),
        [normal(n, m)],
        lambda t: np.abs(t.data) < 1e-4,
    )
    yield "log", _weighted(ad.log, out(n, m)), [Tensor(rng.uniform(0.2, 3.0, size=(n, m)))], None
    yield "softmax_rows", _weighted(ad.softmax_rows, out(n, m)), [normal(n, m)], None
    yield "log_softmax_rows", _weighted(ad.log_softmax_rows, out(n, m)), [normal(n, m)], None
    yield "sum", lambda a: ad.scale(ad.sum(a), 1.7), [normal(n, m)], None
    yield "sum-rows", _weighted(lambda a: ad.sum(a, axis=1), out(n)), [normal(n, m)], None
    yield "mean", lambda a: ad.scale(ad.mean(a), 1.7), [normal(n, m)], None
    yield "mean-rows", _weighted(lambda a: ad.mean(a, axis=1), out(n)), [normal(n, m)], None
    lo = int(rng.integers(0, m))
    hi = int(rng.integers(lo + 1, m + 1))
    yield (
        "slice_columns",
        _weighted(lambda a: ad.slice_columns(a, lo, hi), out(n, hi - lo)),
        [normal(n, m)],
        None,
    )
    yield (
        "concat_columns",
        _weighted(lambda a, b: ad.concat_columns([a, b]), out(n, m + p)),
        [normal(n, m), normal(n, p)],
        None,
    )
    yield (
        "reshape",
        _weighted(lambda a: ad.reshape(a, (n * m, 1)), out(n * m, 1)),
        [normal(n, m)],
        None,
    )
    idx = rng.integers(0, m, size=int(rng.integers(1, 2 * m + 1)))
    yield (
        "take_columns",
        _weighted(lambda a: ad.take_columns(a, idx), out(n, idx.size)),
        [normal(n, m)],
        None,
    )


def check_primitives(trials: int = 100, seed: int = 0, h: float = 1e-6) -> list[CheckResult]:
    """Worst relative error per primitive over ``trials`` random inputs."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        for name, f, points, skip in primitive_cases(rng):
            err = ad.finite_difference_check(f, points, h=h, skip=skip)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, err, trials) for name, err in worst.items()]


def tiny_config(**changes) -> TrainingConfig:
    base = dict(
        dim_u=2,
        k=2,
        hidden=(3,),
        decoder_hidden=(3,),
        dropout=0.2,
        flow_length=1,
        iaf=True,
        labeled_count=2,
        lam=0.3,
        mu=0.7,
        beta1=0.4,
        beta2=0.9,
    )
    base.update(changes)
    return TrainingConfig(**base)


def tiny_instance(config: TrainingConfig, seed: int = 0):
    """(params, mixed batch, unlabeled batch, noise) for a 4-pixel problem."""
    rng = np.random.default_rng(seed)
    params = init_params(config, 4, rng)
    # push the flow away from its near-identity start so its terms matter
    for name, t in params.items():
        t.data[...] += rng.normal(0.0, 0.3, size=t.shape)
    x = rng.uniform(0.0, 1.0, size=(4, 4))
    y = np.eye(config.k)[[0, 1]]
    mixed = Batch.concat(Batch.labeled(x[:2], y), Batch.unlabeled(x[2:], config.k))
    unl = Batch.unlabeled(x, config.k)
    noise = draw_noise(rng, 4, config)
    return params, mixed, unl, noise


def _param_check(params, build: Callable[[], Tensor], h: float) -> float:
    names = [n for n, _ in params.items()]
    return ad.finite_difference_check(lambda *_: build(), [params[n] for n in names], h=h)


def _frozen(parts) -> FrozenSample:
    lat = parts.latents
    return FrozenSample(lat.v_index, parts.reward, parts.baseline)


def check_objectives(seed: int = 0, h: float = 1e-6) -> list[CheckResult]:
    """Full-parameter checks of every objective, with and without the flow."""
    results = []
    for iaf in (True, False):
        tag = "iaf" if iaf else "plain"
        for variant, v_mode in (("sdvae1", "expected"), ("sdvae2", "sample")):
            config = tiny_config(variant=variant, iaf=iaf)
            params, mixed, unl, noise = tiny_instance(config, seed)

            with ad.no_grad():
                first = elbo_terms(params, mixed.x, noise, v_mode)
            index = first.latents.v_index
            results.append(CheckResult(
                f"elbo[{v_mode},{tag}]",
                _param_check(params, lambda: elbo_terms(params, mixed.x, noise, v_mode, index).total, h),
            ))
            if variant == "sdvae1":
                results.append(CheckResult(
                    f"sdvae1_loss[{tag}]",
                    _param_check(params, lambda: sdvae1_loss(params, mixed, noise).total, h),
                ))
                continue
            with ad.no_grad():
                frozen = _frozen(sdvae2_loss(params, mixed, noise))
                frozen_u = _frozen(unlabeled_loss(params, unl, noise))
            results.append(CheckResult(
                f"sdvae2_loss[{tag}]",
                _param_check(params, lambda: sdvae2_loss(params, mixed, noise, frozen).total, h),
            ))
            results.append(CheckResult(
                f"unlabeled_loss[{tag}]",
                _param_check(params, lambda: unlabeled_loss(params, unl, noise, frozen_u).total, h),
            ))
    return results


def run_suite(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    return check_primitives(trials, seed) + check_objectives(seed)
