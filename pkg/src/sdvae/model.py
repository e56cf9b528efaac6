"""SDVAE networks and objectives.

The encoder is a shared trunk with two heads: ``q(u|x)`` (diagonal
Gaussian, optionally refined by an IAF chain) and ``q(v|x)`` (categorical
over the K classes).  The decoder reads the concatenation ``u || v``.

Objectives are written in minimisation form (``total`` is a loss):

* :func:`elbo_terms`      reconstruction, KL_u and KL_v; total = -mean(RE - lam*(KL_u + KL_v))
* :func:`sdvae1_loss`     adds ``mu * sum_i y_i log q(v_i|x)`` on labeled rows
* :func:`sdvae2_loss`     adds the REINFORCE surrogate and ``beta2 * H(q(v|x))``
* :func:`unlabeled_loss`  ELBO plus ``beta2 * H`` only
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError, TrainingConfig, from_mapping, to_mapping
from .distributions import (
    CategoricalPosterior,
    GaussianPosterior,
    NoiseSample,
    bernoulli_recon_loglik,
    categorical_entropy,
    categorical_kl_uniform,
    check_one_hot,
    gaussian_kl_standard,
    gaussian_recon_loglik,
    reparam_sample,
)
from .flow import FlowStep, flow_kl_u, run_flow

# --------------------------------------------------------------- parameters


def _conv_geometry(config: TrainingConfig) -> list[tuple[int, int, int, int]]:
    """(height, width, channels_in, channels_out) at the input of each conv layer."""
    if config.image_shape is None:
        raise ConfigError("image_shape", "the conv encoder needs the image height and width")
    h, w = config.image_shape
    c_in, out = 1, []
    for c_out in config.conv_channels:
        out.append((h, w, c_in, c_out))
        h = (h - config.conv_kernel) // config.conv_stride + 1
        w = (w - config.conv_kernel) // config.conv_stride + 1
        if h < 1 or w < 1:
            raise ConfigError("conv_channels", "too many conv layers for the image size")
        c_in = c_out
    out.append((h, w, c_in, 0))
    return out


def im2col_index(h: int, w: int, c: int, kernel: int, stride: int) -> np.ndarray:
    """Column indices gathering every kernel patch from an HWC-flattened image.

    Returns an (L, kernel*kernel*c) array, L = number of output positions.
    """
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    dy, dx, ch = np.meshgrid(np.arange(kernel), np.arange(kernel), np.arange(c), indexing="ij")
    rows = oy.reshape(-1, 1) * stride + dy.reshape(1, -1)
    cols = ox.reshape(-1, 1) * stride + dx.reshape(1, -1)
    return (rows * w + cols) * c + ch.reshape(1, -1)


def _dense(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class ModelParams:
    """Named parameter tensors plus the config that fixes their shapes."""

    def __init__(self, tensors: dict[str, Tensor], config: TrainingConfig, dim_x: int):
        self.tensors = dict(tensors)
        self.config = config
        self.dim_x = dim_x

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def trunk_depth(self) -> int:
        return len(self.config.hidden)

    def flow_steps(self) -> list[FlowStep]:
        return [
            FlowStep(*(self.tensors[f"flow.{t}.{n}"] for n in ("w_delta", "b_delta", "w_pi", "b_pi")))
            for t in range(self.config.effective_flow_length)
        ]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy()) for k, v in self.tensors.items()}, self.config, self.dim_x)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def init_params(config: TrainingConfig, dim_x: int, rng: np.random.Generator) -> ModelParams:
    p: dict[str, np.ndarray] = {}
    width = dim_x
    if config.encoder == "conv":
        geo = _conv_geometry(config)
        if geo[0][0] * geo[0][1] != dim_x:
            raise ConfigError("image_shape", f"{config.image_shape} does not match dim_x={dim_x}")
        for i, (_, _, c_in, c_out) in enumerate(geo[:-1]):
            fan_in = config.conv_kernel ** 2 * c_in
            p[f"conv.{i}.w"] = _dense(rng, fan_in, c_out)
            p[f"conv.{i}.b"] = np.zeros(c_out)
        h, w, c, _ = geo[-1]
        width = h * w * c
    for i, n in enumerate(config.hidden):
        p[f"enc.{i}.w"] = _dense(rng, width, n)
        p[f"enc.{i}.b"] = np.zeros(n)
        width = n
    p["u_head.w"] = _dense(rng, width, 2 * config.dim_u)
    p["u_head.b"] = np.zeros(2 * config.dim_u)
    p["v_head.w"] = _dense(rng, width, config.k)
    p["v_head.b"] = np.zeros(config.k)
    width = config.dim_u + config.k
    for i, n in enumerate(config.decoder_hidden):
        p[f"dec.{i}.w"] = _dense(rng, width, n)
        p[f"dec.{i}.b"] = np.zeros(n)
        width = n
    p["dec.out.w"] = _dense(rng, width, dim_x)
    p["dec.out.b"] = np.zeros(dim_x)
    tensors = {name: Tensor(v, name=name) for name, v in p.items()}
    for t in range(config.effective_flow_length):
        step = FlowStep.init(config.dim_u, rng)
        for n, tensor in step.tensors().items():
            tensor.name = f"flow.{t}.{n}"
            tensors[tensor.name] = tensor
    return ModelParams(tensors, config, dim_x)


# -------------------------------------------------------------------- noise


@dataclass
class Noise:
    """Every random quantity one forward pass consumes."""

    eps: NoiseSample
    v_uniform: np.ndarray
    dropout: tuple[np.ndarray, ...] = ()


def draw_noise(rng: np.random.Generator, batch: int, config: TrainingConfig, train: bool = True) -> Noise:
    eps = NoiseSample.draw(rng, (batch, config.dim_u))
    v_uniform = rng.random(batch)
    masks: tuple[np.ndarray, ...] = ()
    if train and config.dropout > 0:
        keep = 1.0 - config.dropout
        masks = tuple((rng.random((batch, n)) < keep) / keep for n in config.hidden)
    return Noise(eps, v_uniform, masks)


def fixed_noise(batch: int, config: TrainingConfig) -> Noise:
    """Deterministic noise: eps = 0, no dropout; used for evaluation."""
    return Noise(NoiseSample(np.zeros((batch, config.dim_u)), {}), np.full(batch, 0.5))


# -------------------------------------------------------------------- batch


@dataclass
class Batch:
    """Inputs with one-hot labels on labeled rows and zero rows elsewhere."""

    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        n = self.x.shape[0]
        if self.y.ndim != 2 or self.y.shape[0] != n or self.mask.shape != (n,):
            raise ValueError("x, y and mask disagree on the number of rows")
        if self.mask.any():
            check_one_hot(self.y[self.mask], self.y.shape[1])
        if np.any(self.y[~self.mask] != 0):
            raise ValueError("unlabeled rows must not carry labels")

    @classmethod
    def unlabeled(cls, x, k: int) -> "Batch":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.zeros((x.shape[0], k)), np.zeros(x.shape[0], dtype=bool))

    @classmethod
    def labeled(cls, x, y_onehot) -> "Batch":
        y = np.asarray(y_onehot, dtype=np.float64)
        return cls(x, y, np.ones(y.shape[0], dtype=bool))

    @classmethod
    def concat(cls, *batches: "Batch") -> "Batch":
        return cls(
            np.concatenate([b.x for b in batches]),
            np.concatenate([b.y for b in batches]),
            np.concatenate([b.mask for b in batches]),
        )

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[1]


# ------------------------------------------------------------------ network


def _trunk(params: ModelParams, x: Tensor, noise: Noise | None) -> Tensor:
    config = params.config
    h = x
    if config.encoder == "conv":
        geo = _conv_geometry(config)
        batch = x.shape[0]
        for i, (hh, ww, c_in, c_out) in enumerate(geo[:-1]):
            idx = im2col_index(hh, ww, c_in, config.conv_kernel, config.conv_stride)
            patches = ad.take_columns(h, idx.reshape(-1))
            patches = ad.reshape(patches, (batch * idx.shape[0], idx.shape[1]))
            out = ad.tanh(ad.add(ad.matmul(patches, params[f"conv.{i}.w"]), params[f"conv.{i}.b"]))
            h = ad.reshape(out, (batch, idx.shape[0] * c_out))
    for i in range(params.trunk_depth()):
        h = ad.tanh(ad.add(ad.matmul(h, params[f"enc.{i}.w"]), params[f"enc.{i}.b"]))
        if noise is not None and noise.dropout:
            h = ad.mul(h, Tensor.constant(noise.dropout[i]))
    return h


def _as_input(x, dim_x: int) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor.constant(np.asarray(x, dtype=np.float64))
    if x.data.ndim != 2 or x.shape[1] != dim_x:
        raise ConfigError("dim_x", f"model expects inputs of width {dim_x}, got shape {x.shape}")
    return x


def encode(params: ModelParams, x, noise: Noise | None = None) -> tuple[GaussianPosterior, CategoricalPosterior]:
    """Shared trunk, then the ``q(u|x)`` and ``q(v|x)`` heads."""
    h = _trunk(params, _as_input(x, params.dim_x), noise)
    dim_u = params.config.dim_u
    u_out = ad.add(ad.matmul(h, params["u_head.w"]), params["u_head.b"])
    g = GaussianPosterior.from_log_var(
        ad.slice_columns(u_out, 0, dim_u), ad.slice_columns(u_out, dim_u, 2 * dim_u)
    )
    logits = ad.add(ad.matmul(h, params["v_head.w"]), params["v_head.b"])
    return g, CategoricalPosterior.from_logits(logits)


def decode(params: ModelParams, u, v) -> Tensor:
    """Pixel logits (or means, for the Gaussian likelihood) from ``u || v``."""
    u = u if isinstance(u, Tensor) else Tensor.constant(u)
    v = v if isinstance(v, Tensor) else Tensor.constant(v)
    config = params.config
    if u.shape[1] != config.dim_u or v.shape[1] != config.k or u.shape[0] != v.shape[0]:
        raise ad.ShapeError("decode", u.shape, v.shape)
    h = ad.concat_columns([u, v])
    for i in range(len(config.decoder_hidden)):
        h = ad.tanh(ad.add(ad.matmul(h, params[f"dec.{i}.w"]), params[f"dec.{i}.b"]))
    return ad.add(ad.matmul(h, params["dec.out.w"]), params["dec.out.b"])


def recon_loglik(params: ModelParams, out: Tensor, x: np.ndarray) -> Tensor:
    if params.config.likelihood == "gaussian":
        return gaussian_recon_loglik(out, x)
    return bernoulli_recon_loglik(out, x)


def pixel_means(params: ModelParams, out: Tensor) -> np.ndarray:
    if params.config.likelihood == "gaussian":
        return out.data.copy()
    with ad.no_grad():
        return ad.sigmoid(Tensor.constant(out.data)).data


def sample_categorical(probs: np.ndarray, uniform: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one class per row."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < uniform[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


# --------------------------------------------------------------- objectives


@dataclass
class LatentPair:
    posterior: GaussianPosterior
    u: Tensor
    v_probs: CategoricalPosterior
    v_index: np.ndarray | None
    v_sample: np.ndarray | None
    kl_u: Tensor
    kl_v: Tensor


@dataclass
class LossBreakdown:
    """Per-row terms of an objective and the scalar minibatch loss."""

    re: Tensor
    kl_u: Tensor
    kl_v: Tensor
    total: Tensor
    constraint: Tensor | None = None
    entropy: Tensor | None = None
    reward: np.ndarray | None = None
    baseline: np.ndarray | None = None
    latents: LatentPair | None = field(default=None, repr=False)

    def summary(self) -> dict[str, float]:
        out = {
            "total": self.total.item(),
            "re": float(self.re.data.mean()),
            "kl_u": float(self.kl_u.data.mean()),
            "kl_v": float(self.kl_v.data.mean()),
        }
        if self.constraint is not None:
            out["constraint"] = float(self.constraint.data.mean())
        if self.entropy is not None:
            out["entropy"] = float(self.entropy.data.mean())
        if self.reward is not None:
            out["reward"] = float(self.reward.mean())
        return out


@dataclass
class FrozenSample:
    """Stop-gradient quantities pinned from an earlier evaluation.

    Pinning them turns the SDVAE-II surrogate into an ordinary function of
    the parameters, which is what the finite-difference oracle needs.
    """

    v_index: np.ndarray
    reward: np.ndarray | None = None
    baseline: np.ndarray | None = None


def _elbo_objective(re: Tensor, kl_u: Tensor, kl_v: Tensor, lam: float) -> Tensor:
    return ad.sub(re, ad.scale(ad.add(kl_u, kl_v), lam))


def elbo_terms(
    params: ModelParams,
    x,
    noise: Noise,
    v_mode: str | None = None,
    v_index: np.ndarray | None = None,
) -> LossBreakdown:
    """Encode, run the flow, decode; fill RE, KL_u and KL_v.

    ``v_mode`` chooses what the decoder sees: the simplex row ("expected")
    or a one-hot draw from it ("sample").  ``v_index`` pins the draw.
    """
    config = params.config
    v_mode = v_mode or config.v_mode
    xt = _as_input(x, params.dim_x)
    g, c = encode(params, xt, noise)
    steps = params.flow_steps()
    if steps:
        state = run_flow(g, noise.eps, steps)
        u, kl_u = state.u, flow_kl_u(state)
    else:
        u, kl_u = reparam_sample(g, noise.eps), gaussian_kl_standard(g)
    kl_v = categorical_kl_uniform(c)

    index = sample_one_hot = None
    if v_mode == "sample":
        index = v_index if v_index is not None else sample_categorical(c.probs.data, noise.v_uniform)
        sample_one_hot = np.eye(config.k)[index]
        v_dec = Tensor.constant(sample_one_hot)
    elif v_mode == "expected":
        v_dec = c.probs
    else:
        raise ConfigError("decode_v", f"unknown mode {v_mode!r}")

    re = recon_loglik(params, decode(params, u, v_dec), xt.data)
    total = ad.scale(ad.mean(_elbo_objective(re, kl_u, kl_v, config.lam)), -1.0)
    latents = LatentPair(g, u, c, index, sample_one_hot, kl_u, kl_v)
    return LossBreakdown(re, kl_u, kl_v, total, latents=latents)


def label_term(c: CategoricalPosterior, batch: Batch) -> Tensor:
    """sum_i y_i log q(v_i|x); identically zero on unlabeled rows."""
    return ad.sum(ad.mul(c.log_probs, Tensor.constant(batch.y)), axis=1)


def sdvae1_loss(params: ModelParams, batch: Batch, noise: Noise) -> LossBreakdown:
    config = params.config
    if config.mu < 0:
        raise ConfigError("mu", "must be >= 0")
    parts = elbo_terms(params, batch.x, noise)
    U = label_term(parts.latents.v_probs, batch)
    obj = ad.add(_elbo_objective(parts.re, parts.kl_u, parts.kl_v, config.lam), ad.scale(U, config.mu))
    parts.constraint = U
    parts.total = ad.scale(ad.mean(obj), -1.0)
    return parts


def reward(parts: LossBreakdown) -> np.ndarray:
    """R = RE - (KL_u + KL_v) per row; never weighted by lambda."""
    return parts.re.data - (parts.kl_u.data + parts.kl_v.data)


def baseline(config: TrainingConfig, probs: np.ndarray, r: np.ndarray) -> np.ndarray:
    """c per row: the batch-mean reward, or the row mean of q(v|x) (= 1/K)."""
    if config.baseline == "batch_reward":
        return np.full(r.shape, r.mean())
    return probs.mean(axis=1)


def sdvae2_loss(
    params: ModelParams,
    batch: Batch,
    noise: Noise,
    frozen: FrozenSample | None = None,
) -> LossBreakdown:
    """ELBO + f(y) (beta1 R - c) log q(v|x) + beta2 H(q(v|x)).

    R and c enter as constants, so the gradient of the surrogate is the
    score-function estimator.  On labeled rows f(y) = y: the log-probability
    of the true class replaces that of the drawn class.  With beta1 == 0 the
    unlabeled rows carry a v-independent coefficient whose expected gradient
    is zero, so their surrogate is dropped (and the whole term when no row
    is labeled).
    """
    config = params.config
    v_index = frozen.v_index if frozen is not None else None
    parts = elbo_terms(params, batch.x, noise, v_index=v_index)
    lat = parts.latents
    obj = _elbo_objective(parts.re, parts.kl_u, parts.kl_v, config.lam)

    r = reward(parts) if frozen is None or frozen.reward is None else frozen.reward
    if frozen is not None and frozen.baseline is not None:
        c = frozen.baseline
    else:
        c = baseline(config, lat.v_probs.probs.data, r)
    parts.reward, parts.baseline = r, c
    coef = config.beta1 * r - c
    if config.beta1 == 0.0:
        coef = np.where(batch.mask, coef, 0.0)
    if config.beta1 != 0.0 or batch.mask.any():
        if lat.v_sample is not None:
            drawn = lat.v_sample
        else:
            drawn = np.eye(config.k)[sample_categorical(lat.v_probs.probs.data, noise.v_uniform)]
        chosen = np.where(batch.mask[:, None], batch.y, drawn)
        log_q = ad.sum(ad.mul(lat.v_probs.log_probs, Tensor.constant(chosen)), axis=1)
        surrogate = ad.mul(log_q, Tensor.constant(coef))
        obj = ad.add(obj, surrogate)
        parts.constraint = surrogate
    else:
        parts.constraint = Tensor.constant(np.zeros(len(batch)))
    H = categorical_entropy(lat.v_probs)
    obj = ad.add(obj, ad.scale(H, config.beta2))
    parts.entropy = H
    parts.total = ad.scale(ad.mean(obj), -1.0)
    return parts


def unlabeled_loss(
    params: ModelParams, batch: Batch, noise: Noise, frozen: FrozenSample | None = None
) -> LossBreakdown:
    if batch.mask.any():
        raise ad.UsageError("unlabeled_loss got a batch with labeled rows")
    config = params.config
    parts = elbo_terms(params, batch.x, noise, v_index=frozen.v_index if frozen is not None else None)
    H = categorical_entropy(parts.latents.v_probs)
    obj = ad.add(_elbo_objective(parts.re, parts.kl_u, parts.kl_v, config.lam), ad.scale(H, config.beta2))
    parts.entropy = H
    parts.total = ad.scale(ad.mean(obj), -1.0)
    return parts


def loss(params: ModelParams, batch: Batch, noise: Noise) -> LossBreakdown:
    """Objective selected by ``params.config.variant``."""
    if params.config.variant == "sdvae1":
        return sdvae1_loss(params, batch, noise)
    return sdvae2_loss(params, batch, noise)


# --------------------------------------------------------------- inference


def predict_proba(params: ModelParams, x) -> np.ndarray:
    with ad.no_grad():
        _, c = encode(params, x)
    return c.probs.data


def predict(params: ModelParams, x) -> np.ndarray:
    """Class = argmax of q(v|x); ties go to the lowest index."""
    with ad.no_grad():
        _, c = encode(params, x)
    return np.argmax(c.logits.data, axis=1)


def latent_means(params: ModelParams, x) -> tuple[np.ndarray, np.ndarray]:
    """(v probabilities, mean of q(u|x)) without noise or dropout."""
    with ad.no_grad():
        g, c = encode(params, x)
    return c.probs.data, g.mu.data


def reconstruct(params: ModelParams, x, mask: str = "none") -> tuple[np.ndarray, np.ndarray]:
    """Deterministic reconstruction with u at its (flowed) mean and v at its
    decoder-mode value.  ``mask`` zeroes ``u`` or ``v`` before decoding.

    Returns (pixel means, per-row reconstruction log-likelihood).
    """
    if mask not in ("none", "mask-u", "mask-v"):
        raise ValueError(f"mask must be none, mask-u or mask-v; got {mask!r}")
    config = params.config
    x = np.asarray(x, dtype=np.float64)
    with ad.no_grad():
        g, c = encode(params, x)
        noise = fixed_noise(x.shape[0], config)
        steps = params.flow_steps()
        u = run_flow(g, noise.eps, steps).u if steps else g.mu
        if config.v_mode == "sample":
            v = Tensor.constant(np.eye(config.k)[np.argmax(c.logits.data, axis=1)])
        else:
            v = c.probs
        if mask == "mask-u":
            u = Tensor.constant(np.zeros(u.shape))
        elif mask == "mask-v":
            v = Tensor.constant(np.zeros(v.shape))
        out = decode(params, u, v)
        re = recon_loglik(params, out, x)
    return pixel_means(params, out), re.data


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"SDVAECK\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """Write a versioned binary checkpoint.

    Layout: 8-byte magic, little-endian u32 version, u32 header length,
    UTF-8 JSON header (config, dim_x, tensor names and shapes), then the
    tensors as little-endian float64 in header order.
    """
    Path(path).write_bytes(checkpoint_bytes(params, extra))


def checkpoint_bytes(params: ModelParams, extra: dict | None = None) -> bytes:
    header = {
        "version": CHECKPOINT_VERSION,
        "dim_x": params.dim_x,
        "config": to_mapping(params.config),
        "tensors": [[name, list(t.shape)] for name, t in params.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    for t in params:
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an SDVAE checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated while reading {name}")
        tensors[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64), name=name)
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    config = from_mapping(header["config"])
    return ModelParams(tensors, config, header["dim_x"]), header.get("extra", {})
