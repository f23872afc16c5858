"""Declarative experiment configuration.

A config is one JSON document. Missing keys take defaults, unknown keys are
rejected, and command-line flags override both.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .calibrator import CalibrationConfig, QuantConfig
from .model import ModelConfig, PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    mlp_ratio: int = 4
    context_len: int = 128
    norm_eps: float = 1e-5

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **asdict(self))


@dataclass
class PretrainSection:
    steps: int = 1500
    batch_size: int = 16
    seq_len: int = 128
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup: int = 50


@dataclass
class DataSection:
    corpus: str | None = None  # None selects the bundled sample corpus
    eval_splits: list[str] = field(default_factory=lambda: ["valid", "test"])
    calibration_split: str = "train"


@dataclass
class SaliencySection:
    n_samples: int = 32
    seq_len: int = 128
    split: str = "train"


@dataclass
class CalibrationSection:
    variant: str = "none"
    lora_position: str = "before"
    coef: float = 1e-2
    coef_mult: float = 1.0
    epochs: int = 20
    batch_size: int = 1
    lr_quant: float = 0.005
    lr_lora: float = 0.0005
    wd_quant: float = 0.1
    wd_lora: float = 0.1
    n_samples: int = 128
    seq_len: int = 128


@dataclass
class EvalSection:
    batch_size: int = 16


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    data: DataSection = field(default_factory=DataSection)
    quant: QuantConfig = field(default_factory=QuantConfig)
    saliency: SaliencySection = field(default_factory=SaliencySection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- conversions --------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc, "")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Apply dotted-key overrides such as ``{"quant.bits": 8}``."""
        doc = copy.deepcopy(self.to_dict())
        for key, value in overrides.items():
            node = doc
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return ExperimentConfig.from_dict(doc)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(seed=self.seed, **asdict(self.pretrain))

    def calibration_config(self) -> CalibrationConfig:
        return CalibrationConfig(seed=self.seed, **asdict(self.calibration))


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        current = getattr(defaults, name)
        if hasattr(current, "__dataclass_fields__"):
            kwargs[name] = _build(type(current), value, f"{where}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e
