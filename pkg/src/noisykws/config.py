"""Run configuration: TOML/JSON file, then command-line flags, then KWS_SEED.

File layout (every section optional)::

    seed = 0
    model = "kwt-tiny"
    method = "d2v-denoising"

    [data]      -> DataConfig
    [train]     -> TrainConfig
    [pretrain]  -> PretrainConfig (variant comes from the method)
    [augment]   -> SpecAugmentConfig
    [mfcc]      -> MfccConfig
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli

from .dsp import MfccConfig
from .model import KwtConfig
from .pipeline import METHODS, DataConfig, method_plan
from .pretrain import PretrainConfig
from .train import SpecAugmentConfig, TrainConfig

SEED_ENV = "KWS_SEED"
SECTIONS = {"data": DataConfig, "train": TrainConfig, "pretrain": PretrainConfig,
            "augment": SpecAugmentConfig, "mfcc": MfccConfig}
MODELS = ("kwt1", "kwt2", "kwt3", "kwt-tiny")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: str | None = None  # None: not requested, kwt1 for training
    method: str = "baseline-clean"
    out: str = "runs"
    threads: int = 1
    deterministic: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)

    @property
    def model_name(self) -> str:
        return self.model or "kwt1"

    def model_config(self, n_classes: int) -> KwtConfig:
        return KwtConfig.variant(self.model_name, n_classes=n_classes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


TOP_LEVEL = {f.name for f in fields(RunConfig)} - set(SECTIONS)


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomli.loads(text)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _build_section(cls, values: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}; valid: {', '.join(known)}")
    clean = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        clean[k] = v
    try:
        return cls(**clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def resolve(raw: dict | None = None, overrides: dict | None = None, env=None) -> RunConfig:
    """File dict + flag overrides (None values ignored) + environment -> validated RunConfig."""
    raw = dict(raw or {})
    env = os.environ if env is None else env
    unknown = sorted(set(raw) - TOP_LEVEL - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}; valid: {', '.join(sorted(TOP_LEVEL | set(SECTIONS)))}")
    top = {k: raw[k] for k in TOP_LEVEL if k in raw}
    top.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if env.get(SEED_ENV):
        try:
            top["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    if top.get("model") is not None and top["model"] not in MODELS:
        raise ConfigError(f"unknown model {top['model']!r}; valid: {', '.join(MODELS)}")
    method = top.get("method", "baseline-clean")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    for k in ("seed", "threads"):
        if k in top and not isinstance(top[k], int):
            raise ConfigError(f"{k} must be an integer")
    if top.get("threads", 1) < 1:
        raise ConfigError("threads must be >= 1")
    variant, policy = method_plan(method)
    sections = {}
    for name, cls in SECTIONS.items():
        if not isinstance(raw.get(name, {}), dict):
            raise ConfigError(f"[{name}] must be a table")
        values = dict(raw.get(name) or {})
        if name == "pretrain":
            if "variant" in values:
                raise ConfigError("pretrain.variant is implied by the method; remove it")
            values["variant"] = variant or "clean"
        if name == "train":
            if "data_policy" in values:
                raise ConfigError("train.data_policy is implied by the method; remove it")
            values["data_policy"] = policy
        sections[name] = _build_section(cls, values, name)
    try:
        return RunConfig(**top, **sections)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_json(cfg: RunConfig, command: str, extra: dict | None = None) -> str:
    payload: dict[str, Any] = {"command": command, **cfg.to_dict(), **(extra or {})}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def from_resolved_json(path) -> RunConfig:
    """Re-load a config echoed into a run directory."""
    d = json.loads(Path(path).read_text())
    for k in ("command", "inputs", "data_dir", "checkpoint", "init_checkpoint"):
        d.pop(k, None)
    d["pretrain"].pop("variant", None)
    d["train"].pop("data_policy", None)
    return resolve(d, env={})
