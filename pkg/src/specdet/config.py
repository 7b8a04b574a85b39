"""Flat ``key = value`` configuration files and the training config."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # optimisation schedule
    learning_rate: float = 0.001
    epochs: int = 50
    batch_size: int = 8
    optimizer: str = "adamw"
    weight_decay: float = 0.0005
    warmup_epochs: int = 5
    scheduler: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # loss weights
    lambda1: float = 0.1
    lambda2: float = 0.1
    ortho_lambda: float = 1.0
    margin: float = 0.2
    anchor_modality: str = "visible"
    negative_mining: str = "same_sample"
    neg_obj_weight: float = 0.5
    box_beta: float = 1.0 / 9.0
    # architecture
    image_size: int = 256
    widths: tuple[int, ...] = (16, 32, 32)
    fusion_width: int = 16
    reduce_ratio: int = 2
    fusion_mode: str = "weighted_sum"
    num_classes: int = 1
    # ablations
    use_msfpm: bool = True
    use_irfdm: bool = True
    use_cl: bool = True
    # evaluation
    val_fraction: float = 0.2
    score_threshold: float = 0.01
    nms_iou: float = 0.45
    eval_every: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self) -> None:
        for name in ("learning_rate", "weight_decay", "margin"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.optimizer != "adamw" or self.scheduler != "cosine":
            raise ConfigError("only optimizer=adamw with scheduler=cosine is implemented")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        if len(self.widths) != 3:
            raise ConfigError("widths needs three entries")
        if min(self.lambda1, self.lambda2, self.ortho_lambda) < 0:
            raise ConfigError("loss weights must be non-negative")

    def effective_lambdas(self) -> tuple[float, float]:
        l1 = self.lambda1 if self.use_irfdm else 0.0
        l2 = self.lambda2 if (self.use_cl and self.use_irfdm) else 0.0
        return l1, l2

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        return coerce(cls, d)


def _convert(value: Any, default: Any, name: str):
    if isinstance(value, str):
        text = value.strip()
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.replace(",", " ").split())
        try:
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError as exc:
            raise ConfigError(f"{name}: cannot parse {value!r}") from exc
        return text
    if isinstance(default, tuple):
        return tuple(value)
    return value


def coerce(cls, values: dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _convert(v, getattr(defaults, k), k) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_flat(text: str) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path, cls=TrainConfig, **overrides):
    values = parse_flat(Path(path).read_text()) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return coerce(cls, values)


def dump_flat(obj) -> str:
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
