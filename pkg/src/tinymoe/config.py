"""YAML experiment configs with sections model / moe / train / data / output."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .moe import MoEConfig
from .trainer import TrainConfig

SECTIONS = ("model", "moe", "train", "data", "output")


class ConfigParseError(ValueError):
    def __init__(self, key_path: str, msg: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {msg}")


@dataclass
class DataConfig:
    train_path: str | None = None
    val_path: str | None = None
    tokenizer: str = "byte"  # "byte" or a SentencePiece model path


@dataclass
class OutputConfig:
    out_dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        model = dataclasses.asdict(self.model)
        moe = model.pop("moe")
        train = dataclasses.asdict(self.train)
        train["betas"] = list(train["betas"])
        return {
            "model": model,
            "moe": moe,
            "train": train,
            "data": dataclasses.asdict(self.data),
            "output": dataclasses.asdict(self.output),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump())


def _build(cls, section: str, raw: Any, **extra):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigParseError(section, f"expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known or key in extra:
            raise ConfigParseError(f"{section}.{key}", "unknown key")
    try:
        return cls(**raw, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(section, str(exc)) from exc


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigParseError("<root>", "expected a mapping")
    for key in doc:
        if key not in SECTIONS:
            raise ConfigParseError(key, "unknown section")
    if "model" not in doc:
        raise ConfigParseError("model", "missing section")
    moe = _build(MoEConfig, "moe", doc["moe"]) if doc.get("moe") is not None else None
    return ExperimentConfig(
        model=_build(ModelConfig, "model", doc["model"], moe=moe),
        train=_build(TrainConfig, "train", doc.get("train")),
        data=_build(DataConfig, "data", doc.get("data")),
        output=_build(OutputConfig, "output", doc.get("output")),
    )


def parse(text: str) -> ExperimentConfig:
    return from_dict(yaml.safe_load(text))


def load(path: str | Path) -> ExperimentConfig:
    """Load a config file, or a bundled config by bare name (e.g. ``full_moe``)."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("tinymoe") / "configs" / f"{Path(path).stem}.yaml"
        if bundled.is_file():
            return parse(bundled.read_text())
        raise FileNotFoundError(path)
    return parse(p.read_text())


BUNDLED = ("full_dense_active", "full_moe", "full_dense_total", "micro_moe", "micro_dense")
