"""Run configuration shared by both training steps, evaluation and the CLI."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

CONFIG_ENV_VAR = "WRIS_CONFIG"

# keys that must agree between a checkpoint and the config that loads it
STRUCTURAL_KEYS = ("hidden_dim", "downsample", "encoder", "visual_dim", "text_dim", "image_size")


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class RunConfig:
    # bilateral prompt
    alpha: float = 0.1
    beta: float = 0.1
    enable_t2v: bool = True
    enable_v2t: bool = True
    attn_v_axis: str = "query"  # "query" | "pixel"

    # sampling
    N: int = 47
    K: int = 6

    # encoders
    encoder: str = "toy"  # "toy" | "adapter"
    hidden_dim: int = 1024
    visual_dim: int = 1024
    text_dim: int = 1024
    downsample: int = 32
    image_size: int = 320
    T_max: int = 20
    vocab_path: str = ""

    # losses
    lambda_cls: float = 5.0
    temperature_init: float = 0.07
    temperature_max: float = 100.0
    psi_mode: str = "zero"  # "zero" | "focal"
    focal_gamma: float = 2.0
    epsilon_clamp: float = 1e-6
    rescale_mode: str = "affine"  # "affine" | "sigmoid"
    sigmoid_scale: float = 10.0
    use_pos_term: bool = True
    use_neg_term: bool = True

    # optimisation, shared by both steps
    optimizer: str = "adamw"
    lr: float = 5e-5
    weight_decay: float = 1e-2
    lr_schedule: str = "poly"
    poly_power: float = 0.9
    epochs: int = 15
    batch: int = 48

    # pseudo labels
    threshold: float = 0.4
    min_component_px: int = 4

    # artifact-level
    seed: int = 0
    data_root: str = ""
    out_dir: str = "runs"
    seg_width: int = 32

    def validate(self) -> "RunConfig":
        checks = [
            (self.N >= 0, "N must be >= 0"),
            (self.K >= 1, "K must be >= 1"),
            (0.0 < self.threshold < 1.0, "threshold must lie in (0, 1)"),
            (self.lambda_cls > 0, "lambda_cls must be > 0"),
            (self.hidden_dim >= 1, "hidden_dim must be >= 1"),
            (self.downsample >= 1, "downsample must be >= 1"),
            (self.image_size % self.downsample == 0, "image_size must be divisible by downsample"),
            (self.T_max >= 1, "T_max must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch >= 1, "batch must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (0 < self.temperature_init < self.temperature_max, "temperature_init must be in (0, temperature_max)"),
            (0 < self.epsilon_clamp < 0.5, "epsilon_clamp must be in (0, 0.5)"),
            (self.encoder in ("toy", "adapter"), "encoder must be 'toy' or 'adapter'"),
            (self.psi_mode in ("zero", "focal"), "psi_mode must be 'zero' or 'focal'"),
            (self.rescale_mode in ("affine", "sigmoid"), "rescale_mode must be 'affine' or 'sigmoid'"),
            (self.attn_v_axis in ("query", "pixel"), "attn_v_axis must be 'query' or 'pixel'"),
            (self.lr_schedule in ("poly", "constant"), "lr_schedule must be 'poly' or 'constant'"),
            (self.optimizer == "adamw", "only the adamw optimizer is supported"),
            (self.min_component_px >= 0, "min_component_px must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def replace(self, **overrides: Any) -> "RunConfig":
        return from_dict({**self.to_dict(), **overrides})

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json() + "\n")


def from_dict(values: dict[str, Any]) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {k: _coerce(known[k], v) for k, v in values.items()}
    return RunConfig(**coerced).validate()


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    kind = type(f.default)
    if isinstance(value, kind):
        return value
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {f.name}: {value!r}") from None


def load_config(path: str | os.PathLike | None = None, **overrides: Any) -> RunConfig:
    """Read a JSON or YAML config file (or the env default) and apply overrides."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    values: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            values = yaml.safe_load(text) or {}
        else:
            values = json.loads(text)
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: config must be a mapping")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(values)


def desk_config(**overrides: Any) -> RunConfig:
    """Scaled-down settings for CPU-sized synthetic runs.

    Canvas 320 -> 64, downsample 32 -> 8, width 1024 -> 64, batch 48 -> 8,
    N 47 -> 7, K 6 -> 2. Encoders are trained from scratch here, so lr is raised from 5e-5.
    """
    values = dict(
        image_size=64,
        downsample=8,
        hidden_dim=64,
        visual_dim=64,
        text_dim=64,
        batch=8,
        N=7,
        K=2,
        epochs=15,
        lr=5e-4,
    )
    values.update(overrides)
    return RunConfig().replace(**values)


def structural_mismatch(a: dict[str, Any], b: dict[str, Any]) -> list[str]:
    return [k for k in STRUCTURAL_KEYS if a.get(k) != b.get(k)]
