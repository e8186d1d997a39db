"""Declarative run configuration: one document drives every command."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SynthSpec
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .reasoning import ReasoningConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class GenerationConfig:
    beam: int = 5
    max_len: int = 20
    length_normalize: bool = True


@dataclass
class SynthSplits:
    val_videos: int = 20
    test_videos: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    output_root: str = "out"
    dialogs: str = ""            # train dialog JSON (defaults under output_root for synth runs)
    val_dialogs: str = ""
    test_dialogs: str = ""
    features: str = ""
    vocab_min_count: int = 1
    synth: SynthSpec = field(default_factory=SynthSpec)
    splits: SynthSplits = field(default_factory=SynthSplits)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    reasoning: ReasoningConfig = field(default_factory=ReasoningConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)

    def validate(self) -> None:
        try:
            self.encoder.validate()
            self.decoder.validate()
            self.training.validate()
            self.reasoning.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.training.lambda_c > 0 and self.decoder.M % 2 != 0:
            raise ConfigError("decoder M must be even when lambda_c > 0 (state loss layer M/2)")
        if self.generation.beam < 1:
            raise ConfigError("generation.beam must be >= 1")
        if self.generation.max_len < 1:
            raise ConfigError("generation.max_len must be >= 1")

    # ---- path helpers -----------------------------------------------------

    def out(self) -> Path:
        root = os.environ.get("AVDIALOG_OUTPUT_ROOT", self.output_root)
        return Path(root)

    def dialog_path(self, split: str) -> Path:
        explicit = {"train": self.dialogs, "validation": self.val_dialogs,
                    "test": self.test_dialogs}[split]
        return Path(explicit) if explicit else self.out() / f"{split}.json"

    def feature_dir(self) -> Path:
        return Path(self.features) if self.features else self.out() / "features"


_SECTIONS = {
    "synth": SynthSpec,
    "splits": SynthSplits,
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "training": TrainingConfig,
    "reasoning": ReasoningConfig,
    "generation": GenerationConfig,
}


def _build_section(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    if cls is ReasoningConfig and "kernel_sizes" in values:
        values = dict(values, kernel_sizes=tuple(values["kernel_sizes"]))
    return cls(**values)


def load_config(path: Path | None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    """Load YAML/JSON config, apply dotted ``key=value`` overrides, validate."""
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text()
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config document must be a mapping")
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like key=value")
        key, value = ov.split("=", 1)
        target = doc
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override path {key!r} conflicts with a scalar")
        target[parts[-1]] = yaml.safe_load(value)
    kwargs = {}
    for name, value in doc.items():
        if name in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            kwargs[name] = _build_section(_SECTIONS[name], value)
        elif name in {f.name for f in dataclasses.fields(RunConfig)}:
            kwargs[name] = value
        else:
            raise ConfigError(f"unknown config key {name!r}")
    config = RunConfig(**kwargs)
    if seed is not None:
        config.seed = seed
        config.training.seed = seed
    config.validate()
    return config


def dump_config(config: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(config), indent=1, sort_keys=True, default=list)
