"""Run configuration: JSON files with sections, dotted-key overrides, hashing."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .corpus import CorpusSpec
from .generate import GenerationParams
from .model import ModelConfig
from .trainer import TrainConfig, config_hash


@dataclass(frozen=True)
class EvalConfig:
    heldout_seed: int = 999
    heldout_count: int = 32
    gen_prompts: int = 16
    edit_prompts: int = 0


@dataclass(frozen=True)
class BaselineConfig:
    codebook_size: int = 32
    kmeans_iters: int = 25
    kmeans_seed: int = 0


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": CorpusSpec,
    "generate": GenerationParams,
    "eval": EvalConfig,
    "baseline": BaselineConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: CorpusSpec
    generate: GenerationParams
    eval: EvalConfig
    baseline: BaselineConfig

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ValueError(f"override key must be <section>.<field>, got {key!r}")
    section, fname = parts
    fields = {f.name for f in dataclasses.fields(SECTIONS[section])}
    if fname not in fields:
        raise ValueError(f"unknown key {key!r}")
    raw.setdefault(section, {})[fname] = value


def load_run_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build the config from a JSON file plus `section.key=value` overrides.
    Unknown sections or keys are rejected."""
    raw: dict = {}
    if path is not None:
        with open(path) as f:
            raw = json.load(f)
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    for name, cls in SECTIONS.items():
        fields = {f.name for f in dataclasses.fields(cls)}
        bad = set(raw.get(name, {})) - fields
        if bad:
            raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        key, _, value = item.partition("=")
        _apply_override(raw, key.strip(), _parse_value(value.strip()))
    built = {name: cls(**raw.get(name, {})) for name, cls in SECTIONS.items()}
    return RunConfig(**built)


def write_resolved_config(path, cfg: RunConfig) -> None:
    payload = cfg.to_dict()
    with open(path, "w") as f:
        json.dump({**payload, "config_hash": cfg.hash}, f, indent=2, sort_keys=True)
        f.write("\n")
