"""Versioned JSON run configuration. Unknown keys are rejected."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import TaskSpec
from .encoder import EncoderConfig
from .fca import FcaConfig
from .pipeline import TrainConfig

CONFIG_VERSION = 1
SECTIONS = ("version", "model", "train", "fca", "task")
# vocab_size and num_classes normally come from the data
MODEL_KEYS = {f.name for f in fields(EncoderConfig)}


class ConfigError(ValueError):
    pass


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"'{section}' must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    fca: FcaConfig = field(default_factory=FcaConfig)
    task: TaskSpec = field(default_factory=TaskSpec)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys("config", d, SECTIONS)
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config 'version' must be {CONFIG_VERSION}, got {d.get('version')!r}")
        model = d.get("model", {})
        _check_keys("model", model, MODEL_KEYS)
        sections = {"train": TrainConfig, "fca": FcaConfig, "task": TaskSpec}
        built = {}
        for name, kind in sections.items():
            body = d.get(name, {})
            _check_keys(name, body, {f.name for f in fields(kind)})
            try:
                built[name] = kind(**body)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid '{name}' section: {e}") from None
        return cls(dict(model), **built)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, "model": dict(self.model), "train": asdict(self.train),
                "fca": asdict(self.fca), "task": asdict(self.task)}

    def encoder_config(self, vocab_size: int | None = None,
                       num_classes: int | None = None) -> EncoderConfig:
        model = dict(self.model)
        model.setdefault("max_len", self.task.max_len)
        if vocab_size is not None:
            model["vocab_size"] = vocab_size
        if num_classes is not None:
            model["num_classes"] = num_classes
        try:
            enc = EncoderConfig(**model)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid 'model' section: {e}") from None
        if self.task.max_len > enc.max_len:
            raise ConfigError(f"task max_len {self.task.max_len} exceeds model max_len {enc.max_len}")
        return enc
