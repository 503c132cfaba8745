"""Training configuration, TOML profiles and ``--key value`` overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import tomli

from .net import ModelConfig
from .objectives import LossWeights, Phase


@dataclass
class TrainConfig:
    phase: str = "finetune"
    epochs: int = 10
    base_lr: float = 1.25e-4
    lr_decay_epochs: list[int] = field(default_factory=lambda: [5, 8])
    lr_decay_factor: float = 0.1
    batch_size: int = 8
    resize_longer_side: int = 1024
    seed: int = 0
    recognizer_enabled: bool = False
    lambda_el: float | None = None
    lambda_ee: float | None = None
    weight_decay: float = 0.05
    grad_clip: float = 10.0
    gamma: float = 4.0
    checkpoint_every: int = 1
    max_steps: int | None = None
    deterministic: bool = False
    text_encoder: str = "hash"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        Phase(self.phase)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.lr_decay_epochs = [int(e) for e in self.lr_decay_epochs]
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if self.lr_decay_epochs and self.lr_decay_epochs[-1] >= self.epochs:
            raise ValueError("every lr decay epoch must come before the last epoch")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.resize_longer_side < 32:
            raise ValueError("resize_longer_side must be at least 32")
        self.model.recognizer_enabled = bool(self.recognizer_enabled)

    @property
    def weights(self) -> LossWeights:
        d = LossWeights.for_phase(self.phase)
        return LossWeights(d.lambda_el if self.lambda_el is None else self.lambda_el,
                           d.lambda_ee if self.lambda_ee is None else self.lambda_ee, d.phase)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d


def lr_at(epoch: int, base_lr: float, decay_epochs, factor: float) -> float:
    """Piecewise-constant schedule; ``epoch`` is zero-based."""
    return base_lr * factor ** sum(epoch >= d for d in decay_epochs)


PROFILES = ("desk", "paper")


def profile_path(name: str) -> Path:
    return Path(str(resources.files("espvie") / "profiles" / f"{name}.toml"))


def load_config_file(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return tomli.load(fh)


def _parse_value(raw: str, current: Any):
    if isinstance(current, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        return raw
    if isinstance(current, float) and isinstance(val, int):
        return float(val)
    return val


def apply_overrides(data: dict, overrides: dict[str, str]) -> dict:
    """Apply ``{"key": "value"}`` strings; ``model.x`` addresses the model table."""
    base = TrainConfig()
    data = json.loads(json.dumps(data))
    for key, raw in overrides.items():
        key = key.replace("-", "_")
        if key.startswith("model."):
            sub = key.split(".", 1)[1]
            if sub not in {f.name for f in dataclasses.fields(ModelConfig)}:
                raise KeyError(f"unknown model option {sub!r}")
            data.setdefault("model", {})[sub] = _parse_value(raw, getattr(base.model, sub))
        else:
            if key not in {f.name for f in dataclasses.fields(TrainConfig)} or key == "model":
                raise KeyError(f"unknown training option {key!r}")
            data[key] = _parse_value(raw, getattr(base, key))
    return data


def build_config(profile: str | None = None, config_file: str | None = None,
                 overrides: dict[str, str] | None = None) -> TrainConfig:
    data: dict = {}
    if profile:
        data.update(load_config_file(profile_path(profile)))
    if config_file:
        extra = load_config_file(config_file)
        model = {**data.get("model", {}), **extra.pop("model", {})}
        data.update(extra)
        if model:
            data["model"] = model
    data = apply_overrides(data, overrides or {})
    return TrainConfig(**data)
