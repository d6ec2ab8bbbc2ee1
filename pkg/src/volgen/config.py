"""Experiment configuration: training hyperparameters and network widths.

Both configs live in one flat YAML document. Omitted keys take their
defaults; unknown keys are rejected. The seed may be overridden with the
``VOLGEN_SEED`` environment variable.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

MODES = ("alpha-wgan-gp", "alpha-gan-vanilla", "wgan-gp-only")
REPEAT_TARGETS = ("encoder-generator", "generator")
SEED_ENV = "VOLGEN_SEED"


class ConfigError(ValueError):
    """Raised when a configuration value is missing, malformed or out of range."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _require_int(key: str, value: Any, minimum: int = 1) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(key, f"must be >= {minimum}, got {value}")


def _require_real(key: str, value: Any, lo: float, hi: float | None = None,
                  hi_open: bool = False) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"must be a real number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    if value < lo:
        raise ConfigError(key, f"must be >= {lo}, got {value}")
    if hi is not None and (value >= hi if hi_open else value > hi):
        raise ConfigError(key, f"must be {'<' if hi_open else '<='} {hi}, got {value}")


@dataclass(frozen=True)
class TrainConfig:
    latent_size: int = 1000
    volume_size: int = 64
    batch_size: int = 4
    learning_rate: float = 0.0002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda1: float = 10.0
    lambda2: float = 10.0
    eg_updates_per_step: int = 2
    d_updates_per_step: int = 1
    c_updates_per_step: int = 1
    total_steps: int = 1000
    mode: str = "alpha-wgan-gp"
    seed: int = 0
    checkpoint_interval: int = 500
    augment: bool = True
    # which networks the 2nd..nth encoder-generator update of a step touches
    repeat_update_target: str = "encoder-generator"
    # penalize the discriminator on both fake populations instead of G(z_r) only
    gp_both_fakes: bool = False

    def __post_init__(self):
        _require_int("latent_size", self.latent_size)
        if (isinstance(self.volume_size, bool) or not isinstance(self.volume_size, int)
                or not _is_pow2(self.volume_size) or self.volume_size < 16):
            raise ConfigError("volume_size", "volume_size must be a power of two ≥ 16")
        _require_int("batch_size", self.batch_size)
        _require_real("learning_rate", self.learning_rate, 0.0)
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be > 0")
        _require_real("adam_beta1", self.adam_beta1, 0.0, 1.0, hi_open=True)
        _require_real("adam_beta2", self.adam_beta2, 0.0, 1.0, hi_open=True)
        _require_real("adam_eps", self.adam_eps, 0.0)
        _require_real("lambda1", self.lambda1, 0.0)
        _require_real("lambda2", self.lambda2, 0.0)
        _require_int("eg_updates_per_step", self.eg_updates_per_step)
        _require_int("d_updates_per_step", self.d_updates_per_step)
        _require_int("c_updates_per_step", self.c_updates_per_step)
        _require_int("total_steps", self.total_steps, minimum=0)
        _require_int("checkpoint_interval", self.checkpoint_interval)
        _require_int("seed", self.seed, minimum=0)
        if self.seed >= 2**64:
            raise ConfigError("seed", "must fit in 64 bits")
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.repeat_update_target not in REPEAT_TARGETS:
            raise ConfigError("repeat_update_target",
                              f"must be one of {', '.join(REPEAT_TARGETS)}")
        for key in ("augment", "gp_both_fakes"):
            if not isinstance(getattr(self, key), bool):
                raise ConfigError(key, "must be true or false")


@dataclass(frozen=True)
class ModelConfig:
    critic_channels: tuple[int, ...] = (64, 128, 256, 512)
    generator_channels: int = 512
    code_hidden: int = 4096
    leaky_slope: float = 0.2

    def __post_init__(self):
        chans = self.critic_channels
        if isinstance(chans, list):
            object.__setattr__(self, "critic_channels", tuple(chans))
            chans = self.critic_channels
        if not isinstance(chans, tuple) or len(chans) != 4:
            raise ConfigError("critic_channels", "must list exactly 4 channel counts")
        for c in chans:
            _require_int("critic_channels", c)
        _require_int("generator_channels", self.generator_channels)
        _require_int("code_hidden", self.code_hidden)
        _require_real("leaky_slope", self.leaky_slope, 0.0, 1.0, hi_open=True)

    @property
    def generator_stage_channels(self) -> tuple[int, ...]:
        """Output channels of the four upsampling stages (mirror of the critic)."""
        return tuple(reversed(self.critic_channels))


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


def configs_from_dict(raw: dict[str, Any] | None,
                      env: dict[str, str] | None = None) -> tuple[TrainConfig, ModelConfig]:
    raw = dict(raw or {})
    unknown = set(raw) - _TRAIN_KEYS - _MODEL_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(key, "unknown configuration key")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            raw["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV} must be an integer") from None
    train = {k: v for k, v in raw.items() if k in _TRAIN_KEYS}
    # ints are acceptable where reals are expected (e.g. ``lambda1: 10``)
    for k in ("learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "lambda1", "lambda2"):
        if isinstance(train.get(k), int) and not isinstance(train.get(k), bool):
            train[k] = float(train[k])
    model = {k: v for k, v in raw.items() if k in _MODEL_KEYS}
    if isinstance(model.get("leaky_slope"), int) and not isinstance(model["leaky_slope"], bool):
        model["leaky_slope"] = float(model["leaky_slope"])
    return TrainConfig(**train), ModelConfig(**model)


def load_config(path: str | os.PathLike) -> tuple[TrainConfig, ModelConfig]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("path", f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("path", f"malformed config file: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("path", "config must be a flat key: value mapping")
    return configs_from_dict(raw)


def config_to_dict(tc: TrainConfig, mc: ModelConfig) -> dict[str, Any]:
    out = dataclasses.asdict(tc)
    model = dataclasses.asdict(mc)
    model["critic_channels"] = list(mc.critic_channels)
    out.update(model)
    return out


def dump_config(tc: TrainConfig, mc: ModelConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(tc, mc), sort_keys=False))
