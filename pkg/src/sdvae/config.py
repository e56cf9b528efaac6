"""Run configuration.

All defaults live in :class:`TrainingConfig`.  Config files are flat YAML
mappings whose keys are the field names below (``lambda`` is accepted as
an alias of ``lam``)::

    variant: sdvae2
    iaf: true
    lambda: 0.1
    beta1: 0.1

======================  =========  ==========================================
field                   default    meaning
======================  =========  ==========================================
lam                     0.1        KL weight (small values work best)
mu                      1.0        weight of the SDVAE-I label term
beta1                   0.1        reward weight in the SDVAE-II surrogate
beta2                   1.0        entropy weight in SDVAE-II / unlabeled loss
flow_length             1          IAF steps when ``iaf`` is on
dim_u                   50         size of the non-interpretable latent
k                       10         classes = size of the disentangled latent
variant                 sdvae2     ``sdvae1`` or ``sdvae2``
iaf                     true       apply the flow to ``u``
labeled_count           1000       labeled training rows
batch_size              100
epochs                  200
learning_rate           1e-3       ADAM step size
seed                    0
======================  =========  ==========================================

Batch size and epoch counts are choices, not published values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class TrainingConfig:
    # objective weights
    lam: float = 0.1
    mu: float = 1.0
    beta1: float = 0.1
    beta2: float = 1.0
    # latent structure
    flow_length: int = 1
    dim_u: int = 50
    k: int = 10
    variant: str = "sdvae2"
    iaf: bool = True
    # how v reaches the decoder: "expected" (simplex row) or "sample" (one-hot)
    decode_v: str | None = None
    # SDVAE-II baseline c: "batch_reward" (mean R over the batch) or "mean_v" (1/K)
    baseline: str = "batch_reward"
    # architecture
    encoder: str = "mlp"
    hidden: tuple[int, ...] = (256, 128)
    decoder_hidden: tuple[int, ...] = (128, 256)
    conv_channels: tuple[int, ...] = (16, 32)
    conv_kernel: int = 3
    conv_stride: int = 2
    image_shape: tuple[int, int] | None = None
    dropout: float = 0.1
    likelihood: str = "bernoulli"
    # data / schedule
    labeled_count: int = 1000
    batch_size: int = 100
    epochs: int = 200
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_grad: float | None = None
    binarize_threshold: float | None = 0.5
    seed: int = 0
    record_time: bool = False

    def __post_init__(self):
        for name in ("lam", "mu", "beta1", "beta2", "dropout"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.dropout >= 1:
            raise ConfigError("dropout", "must be < 1")
        for name in ("dim_u", "k", "batch_size", "conv_kernel", "conv_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be a positive integer, got {getattr(self, name)}")
        for name in ("flow_length", "epochs", "labeled_count"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be positive")
        _choice("variant", self.variant, ("sdvae1", "sdvae2"))
        _choice("baseline", self.baseline, ("batch_reward", "mean_v"))
        _choice("encoder", self.encoder, ("mlp", "conv"))
        _choice("likelihood", self.likelihood, ("bernoulli", "gaussian"))
        if self.decode_v is not None:
            _choice("decode_v", self.decode_v, ("expected", "sample"))
        if self.clip_grad is not None and self.clip_grad <= 0:
            raise ConfigError("clip_grad", "must be positive when set")
        if self.binarize_threshold is not None and not 0 < self.binarize_threshold < 1:
            raise ConfigError("binarize_threshold", "must be in (0, 1)")

    @property
    def effective_flow_length(self) -> int:
        return self.flow_length if self.iaf else 0

    @property
    def v_mode(self) -> str:
        if self.decode_v is not None:
            return self.decode_v
        return "expected" if self.variant == "sdvae1" else "sample"

    @property
    def name(self) -> str:
        return self.variant + ("_iaf" if self.iaf else "")

    def replace(self, **changes) -> "TrainingConfig":
        return from_mapping({**to_mapping(self), **changes})

    def with_data(self, k: int, image_shape=None) -> "TrainingConfig":
        changes: dict[str, Any] = {"k": k}
        if image_shape is not None:
            changes["image_shape"] = tuple(image_shape)
        return dataclasses.replace(self, **changes)


def _choice(name: str, value, options) -> None:
    if value not in options:
        raise ConfigError(name, f"must be one of {', '.join(options)}; got {value!r}")


_FIELDS = {f.name: f for f in fields(TrainingConfig)}
_ALIASES = {"lambda": "lam", "T": "flow_length", "lr": "learning_rate", "K": "k"}
_OPTIONAL = {"decode_v", "clip_grad", "binarize_threshold", "image_shape"}
_TRUE, _FALSE = ("1", "true", "yes", "on"), ("0", "false", "no", "off")


def _kind(name: str) -> str:
    return str(_FIELDS[name].type).split("|")[0].strip()


def _coerce(name: str, value):
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
        if name in _OPTIONAL:
            return None
        raise ConfigError(name, "may not be empty")
    kind = _kind(name)
    try:
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() not in _TRUE + _FALSE:
                    raise ValueError(value)
                return value.lower() in _TRUE
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        if kind.startswith("tuple"):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            elif isinstance(value, int):
                value = [value]
            return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot interpret {value!r}") from None
    return str(value)


def from_mapping(mapping: dict[str, Any]) -> TrainingConfig:
    kwargs = {}
    for key, value in mapping.items():
        name = _ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ConfigError(key, "unknown config field")
        kwargs[name] = _coerce(name, value)
    return TrainingConfig(**kwargs)


def to_mapping(config: TrainingConfig) -> dict[str, Any]:
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


PRESET_DIR = Path(__file__).parent / "configs"


def presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


def load_config(source) -> TrainingConfig:
    """Load a config file, or a bundled preset by name."""
    path = Path(source)
    if not path.exists():
        preset = PRESET_DIR / f"{source}.yaml"
        if not preset.exists():
            raise FileNotFoundError(f"no config file or preset named {source!r}")
        path = preset
    try:
        mapping = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    if not isinstance(mapping, dict):
        raise ConfigError("config", f"{path} must hold a flat key/value mapping")
    return from_mapping(mapping)


def dump_config(config: TrainingConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_mapping(config), sort_keys=True))
