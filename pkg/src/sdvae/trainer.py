"""Minibatch training with ADAM over mixed labeled/unlabeled data."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import ConfigError, TrainingConfig
from .data import Dataset, binarize
from .distributions import categorical_entropy
from .model import (
    Batch,
    ModelParams,
    draw_noise,
    init_params,
    loss,
    predict,
    reconstruct,
)

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised when the loss or an update turns non-finite.

    ``params`` holds the last finite parameters and ``metrics`` the epochs
    completed before the failure.
    """

    def __init__(self, message: str, params: ModelParams | None = None, metrics=None):
        super().__init__(message)
        self.params = params
        self.metrics = metrics or []


# -------------------------------------------------------------------- split


@dataclass(frozen=True)
class SemiSupervisedSplit:
    labeled: Dataset
    unlabeled: Dataset
    labeled_index: np.ndarray
    unlabeled_index: np.ndarray
    # labels of the unlabeled pool, only for oracle evaluation
    hidden_labels: np.ndarray | None = field(default=None, repr=False)


def split_semisupervised(dataset: Dataset, labeled_count: int, seed: int) -> SemiSupervisedSplit:
    """Pick ``labeled_count`` rows, balanced over classes where possible.

    Each class gets ``labeled_count // K`` rows; the remainder is spread one
    row per class over a seeded random choice of classes.
    """
    n, k = len(dataset), dataset.k
    if dataset.labels is None:
        raise ValueError("cannot split a dataset without labels")
    if labeled_count > n:
        raise ValueError(f"labeled_count={labeled_count} exceeds dataset size {n}")
    if labeled_count < k:
        raise ValueError(f"labeled_count={labeled_count} is below the class count {k}")
    rng = np.random.default_rng(seed)
    per_class = np.full(k, labeled_count // k)
    per_class[rng.permutation(k)[: labeled_count % k]] += 1
    chosen = []
    for cls in range(k):
        members = np.flatnonzero(dataset.labels == cls)
        if members.size < per_class[cls]:
            raise ValueError(f"class {cls} has only {members.size} rows, need {per_class[cls]}")
        chosen.append(rng.choice(members, size=per_class[cls], replace=False))
    labeled_index = np.sort(np.concatenate(chosen))
    unlabeled_index = np.setdiff1d(np.arange(n), labeled_index)
    return SemiSupervisedSplit(
        labeled=dataset.subset(labeled_index, name=f"{dataset.name}-labeled"),
        unlabeled=dataset.subset(unlabeled_index, name=f"{dataset.name}-unlabeled", hide_labels=True),
        labeled_index=labeled_index,
        unlabeled_index=unlabeled_index,
        hidden_labels=dataset.labels[unlabeled_index].copy(),
    )


# --------------------------------------------------------------------- adam


class Adam:
    """Bias-corrected ADAM over a :class:`ModelParams`."""

    def __init__(self, params: ModelParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray] | None = None) -> None:
        grads = grads if grads is not None else {name: t.grad for name, t in params.items()}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise ad.NumericError("adam_step", None, f"non-finite gradient for {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, t in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            t.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(opt: Adam, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
    opt.step(params, grads)


# ----------------------------------------------------------------- metrics


@dataclass
class MetricsRecord:
    epoch: int
    re: float
    kl_u: float
    kl_v: float
    entropy: float
    train_err: float | None
    test_err: float | None
    seconds: float | None
    loss: float | None = None
    test_re: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def classification_error(params: ModelParams, dataset: Dataset) -> float:
    if dataset.labels is None:
        raise ValueError(f"{dataset.name} has no labels")
    return float(np.mean(predict(params, dataset.images) != dataset.labels))


def evaluate(params: ModelParams, test: Dataset, epoch: int = -1) -> MetricsRecord:
    """Classification error from argmax q(v|x) plus the deterministic RE."""
    err = classification_error(params, test)
    _, re = reconstruct(params, test.images)
    mean_re = float(re.mean())
    return MetricsRecord(epoch, mean_re, math.nan, math.nan, math.nan, None, err, None, test_re=mean_re)


# -------------------------------------------------------------- batching


def batch_plan(n_labeled: int, n_unlabeled: int, batch_size: int) -> tuple[int, int, int]:
    """(labeled rows per batch, unlabeled rows per batch, batches per epoch).

    Rows are drawn from each pool in proportion to its size, with at least
    one labeled row whenever labels exist.
    """
    total = n_labeled + n_unlabeled
    if total == 0:
        raise ValueError("no training rows")
    batch_size = min(batch_size, total)
    n_batches = math.ceil(total / batch_size)
    if n_unlabeled == 0:
        return batch_size, 0, n_batches
    if n_labeled == 0:
        return 0, batch_size, n_batches
    lab = max(1, round(batch_size * n_labeled / total))
    lab = min(lab, batch_size - 1, n_labeled)
    return lab, batch_size - lab, n_batches


class _Pool:
    """Endless reshuffled stream of row indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n) if n else np.empty(0, dtype=np.intp)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            grab = min(count, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + grab])
            self.pos += grab
            count -= grab
        return np.concatenate(out) if out else np.empty(0, dtype=np.intp)


# ------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[MetricsRecord]
    split: SemiSupervisedSplit | None = None


def prepare(dataset: Dataset, config: TrainingConfig) -> Dataset:
    if config.binarize_threshold is None or config.likelihood != "bernoulli":
        return dataset
    return binarize(dataset, config.binarize_threshold)


def resolve_config(config: TrainingConfig, train: Dataset) -> TrainingConfig:
    if config.k != train.k:
        config = config.replace(k=train.k)
    if config.encoder == "conv" and config.image_shape is None:
        if train.image_shape is None:
            raise ConfigError("image_shape", "conv encoder needs image_shape")
        config = config.replace(image_shape=list(train.image_shape))
    return config


def train(
    config: TrainingConfig,
    train_set: Dataset,
    test_set: Dataset | None = None,
    on_epoch: Callable[[MetricsRecord, ModelParams], None] | None = None,
    split: SemiSupervisedSplit | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs; returns parameters and per-epoch metrics.

    Fully determined by ``config.seed``.  On a non-finite loss the run stops
    with :class:`TrainingDiverged` carrying the last good parameters.
    """
    config = resolve_config(config, train_set)
    train_set = prepare(train_set, config)
    test_set = prepare(test_set, config) if test_set is not None else None
    if config.labeled_count > len(train_set):
        raise ConfigError("labeled_count", f"{config.labeled_count} exceeds training-set size {len(train_set)}")

    split_seed, init_seed, batch_seed, noise_seed = np.random.SeedSequence(config.seed).spawn(4)
    if split is None:
        if config.labeled_count:
            split = split_semisupervised(train_set, config.labeled_count, int(split_seed.generate_state(1)[0]))
        else:
            split = SemiSupervisedSplit(
                _empty_like(train_set),
                train_set.subset(np.arange(len(train_set)), hide_labels=True),
                np.empty(0, dtype=np.intp),
                np.arange(len(train_set)),
                train_set.labels,
            )
    params = init_params(config, train_set.dim_x, np.random.default_rng(init_seed))
    opt = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    batch_rng = np.random.default_rng(batch_seed)
    noise_rng = np.random.default_rng(noise_seed)

    lab_x = split.labeled.images
    lab_y = split.labeled.one_hot() if len(split.labeled) else np.zeros((0, config.k))
    unl_x = split.unlabeled.images
    n_lab, n_unl, n_batches = batch_plan(len(lab_x), len(unl_x), config.batch_size)
    lab_pool = _Pool(len(lab_x), batch_rng)
    unl_pool = _Pool(len(unl_x), batch_rng)

    metrics: list[MetricsRecord] = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        sums = np.zeros(5)
        for _ in range(n_batches):
            li, ui = lab_pool.take(n_lab), unl_pool.take(n_unl)
            parts_ = []
            if li.size:
                parts_.append(Batch.labeled(lab_x[li], lab_y[li]))
            if ui.size:
                parts_.append(Batch.unlabeled(unl_x[ui], config.k))
            batch = Batch.concat(*parts_)
            noise = draw_noise(noise_rng, len(batch), config)
            good = params.copy()
            params.zero_grad()
            try:
                with ad.Graph():
                    parts = loss(params, batch, noise)
                ad.backward(parts.total)
                if config.clip_grad is not None:
                    _clip(params, config.clip_grad)
                opt.step(params)
            except (ad.NumericError, FloatingPointError) as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", good, metrics) from exc
            if not params.all_finite():
                raise TrainingDiverged(f"epoch {epoch}: parameters became non-finite", good, metrics)
            s = parts.summary()
            sums += [s["total"], s["re"], s["kl_u"], s["kl_v"], s.get("entropy", _entropy(parts))]
        means = sums / n_batches
        train_err = classification_error(params, split.labeled) if len(split.labeled) else None
        test_err = test_re = None
        if test_set is not None:
            test_err = classification_error(params, test_set)
            test_re = float(reconstruct(params, test_set.images)[1].mean())
        rec = MetricsRecord(
            epoch=epoch,
            re=float(means[1]),
            kl_u=float(means[2]),
            kl_v=float(means[3]),
            entropy=float(means[4]),
            train_err=train_err,
            test_err=test_err,
            seconds=round(time.perf_counter() - start, 3) if config.record_time else None,
            loss=float(means[0]),
            test_re=test_re,
        )
        metrics.append(rec)
        logger.info("epoch %d loss %.4f test_err %s", epoch, rec.loss, test_err)
        if on_epoch is not None:
            on_epoch(rec, params)
    return TrainResult(params, metrics, split)


def _empty_like(d: Dataset) -> Dataset:
    return Dataset(np.zeros((0, d.dim_x)), np.zeros(0, dtype=np.int64), d.k, f"{d.name}-labeled", d.image_shape)


def _entropy(parts) -> float:
    with ad.no_grad():
        return float(categorical_entropy(parts.latents.v_probs).data.mean())


def _clip(params: ModelParams, max_norm: float) -> None:
    norm = math.sqrt(sum(float((t.grad ** 2).sum()) for t in params))
    if norm > max_norm:
        for t in params:
            t.grad = t.grad * (max_norm / norm)


def write_metrics(path, records: list[MetricsRecord]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def append_metrics(path, record: MetricsRecord) -> None:
    with open(path, "a") as f:
        f.write(record.to_json() + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    return [MetricsRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
