"""Run configuration: a JSON document with per-subsystem sections.

Sections mirror the dataclass configs (``model``, ``train``, ``synth``,
``postproc``, ``metrics``); every field is optional and falls back to the
dataclass default.  Unknown sections or keys are hard errors so typos
cannot silently change a run.  Command-line flags override file values.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .metrics import SsimParams
from .model import ModelConfig
from .postproc import PostprocParams
from .train import TrainConfig


@dataclass
class SynthConfig:
    count: int = 16
    size: int = 256
    seed: int = 0
    noise_sigma: float = 0.0
    brightness_jitter: float = 0.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    postproc: PostprocParams = field(default_factory=PostprocParams)
    metrics: SsimParams = field(default_factory=SsimParams)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "postproc": PostprocParams,
    "metrics": SsimParams,
}

# fields that are not meaningful inside a config document
_EXCLUDED = {"train": {"model"}, "metrics": {"ms_weights"}}


def _build_section(name: str, cls, data: dict):
    allowed = {f.name for f in dataclasses.fields(cls)} - _EXCLUDED.get(name, set())
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in section '{name}'; "
            f"allowed: {sorted(allowed)}"
        )
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid section '{name}': {exc}") from None


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(
            f"unknown section(s) {sorted(unknown)}; allowed: {sorted(_SECTIONS)}"
        )
    sections = {}
    for name, cls in _SECTIONS.items():
        data = doc.get(name, {})
        if not isinstance(data, dict):
            raise ConfigError(f"section '{name}' must be a JSON object")
        sections[name] = _build_section(name, cls, data)
    cfg = RunConfig(**sections)
    cfg.train.model = cfg.model
    return cfg


def default_config_document() -> str:
    """Render the documented defaults as a JSON config skeleton."""
    out = {}
    for name, cls in _SECTIONS.items():
        inst = cls()
        fields = {}
        for f in dataclasses.fields(cls):
            if f.name in _EXCLUDED.get(name, set()):
                continue
            v = getattr(inst, f.name)
            if isinstance(v, np.ndarray):
                v = v.tolist()
            fields[f.name] = v
        out[name] = fields
    return json.dumps(out, indent=2)
