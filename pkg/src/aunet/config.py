"""Model/training configuration, flat ``key = value`` config files and precision selection."""
import dataclasses
import math
import os
import warnings
from dataclasses import dataclass, fields

import torch


class ConfigError(ValueError):
    """Invalid configuration (bad dimensions, unknown keys, unknown enum values)."""


MASK_ACTIVATIONS = ("sigmoid", "softmax", "tanh", "none")
VARIANTS = ("full", "no_mask", "no_lam", "cnn_replace")


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ModelConfig:
    image_size: int = 256
    n_aus: int = 12
    encoder_channels: int = 256
    downsample_factor: int = 16
    embed_dim: int = 16
    mask_activation: str = "sigmoid"
    variant: str = "full"
    mask_bias_init: float = 0.0  # initial bias of the mask logits; negative starts masks mostly closed

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.downsample_factor < 2 or not _is_pow2(self.downsample_factor):
            raise ConfigError(f"downsample_factor must be a power of two >= 2, got {self.downsample_factor}")
        if self.image_size <= 0 or self.image_size % self.downsample_factor:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by downsample_factor {self.downsample_factor}")
        if self.n_aus < 1:
            raise ConfigError(f"n_aus must be >= 1, got {self.n_aus}")
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.encoder_channels < 1:
            raise ConfigError(f"encoder_channels must be >= 1, got {self.encoder_channels}")
        if self.mask_activation not in MASK_ACTIVATIONS:
            raise ConfigError(f"unknown mask_activation {self.mask_activation!r}; expected one of {MASK_ACTIVATIONS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.mask_activation == "tanh":
            warnings.warn("tanh masks leave the [0, 1] attention range (ablation only)", stacklevel=3)

    @property
    def encoder_size(self):
        return self.image_size // self.downsample_factor

    @property
    def n_stages(self):
        return int(math.log2(self.downsample_factor))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 10
    base_lr: float = 1e-5
    warmup_steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1e-6
    lambda_rec: float = 0.001
    margin: float = 0.2
    seed: int = 0
    max_steps: int = 0  # 0 = no cap; otherwise stop after this many optimizer steps

    def __post_init__(self):
        for name in ("epochs", "batch_size", "warmup_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        for name in ("weight_decay", "lambda_rec", "margin", "max_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")


def desk_model_config(**overrides):
    """Small preset that trains on one CPU core: 64px images, 4 AUs, 8x8 encoder grid."""
    kw = dict(image_size=64, n_aus=4, encoder_channels=64, downsample_factor=8, embed_dim=16, mask_bias_init=-2.0)
    kw.update(overrides)
    return ModelConfig(**kw)


def desk_train_config(**overrides):
    # Fewer, larger steps than the full-scale recipe: 3 epochs of 2000 samples is 600 steps,
    # so warmup and base_lr are shrunk/raised to fit that budget.
    # lambda_rec is scaled by the 16x smaller pixel count so the reconstruction term keeps its
    # full-scale weight relative to the AU loss.
    kw = dict(epochs=3, batch_size=10, base_lr=1e-3, warmup_steps=50, lambda_rec=0.016)
    kw.update(overrides)
    return TrainConfig(**kw)


def _coerce(text, typ):
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text.strip().strip('"').strip("'")


def parse_config_text(text):
    """Parse flat ``key = value`` lines into ``(ModelConfig, TrainConfig)``.

    ``#`` starts a comment.  Every key must name a field of one of the two
    dataclasses; anything else raises :class:`ConfigError`.
    """
    model_types = {f.name: f.type for f in fields(ModelConfig)}
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in model_types:
                model_kw[key] = _coerce(value, _resolve(model_types[key]))
            elif key in train_types:
                train_kw[key] = _coerce(value, _resolve(train_types[key]))
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from e
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def _resolve(t):
    if isinstance(t, str):
        return {"int": int, "float": float, "str": str}[t]
    return t


def load_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())


def dump_config(model_cfg, train_cfg):
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(model_cfg).items()]
    lines += [f"{k} = {v}" for k, v in dataclasses.asdict(train_cfg).items()]
    return "\n".join(lines) + "\n"


def get_dtype():
    """Arithmetic precision from ``AUNET_PRECISION`` (``f32`` default, ``f64`` for gradient checks)."""
    value = os.environ.get("AUNET_PRECISION", "f32").lower()
    if value == "f32":
        return torch.float32
    if value == "f64":
        return torch.float64
    raise ConfigError(f"AUNET_PRECISION must be f32 or f64, got {value!r}")
