"""Run configuration: one JSON document covering codec, model, training and sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .jpeg import CodecProfile
from .model import ModelConfig
from .sample import SampleConfig
from .train import TrainConfig

RESOLVED_NAME = "resolved_config.json"


def _build(cls, data: dict | None, section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    if cls is TrainConfig and "betas" in data:
        data["betas"] = tuple(data["betas"])
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"[{section}]: {e}") from e


@dataclass
class RunConfig:
    profile: CodecProfile = field(default_factory=CodecProfile)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    paths: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        extra = set(d) - {"profile", "model", "train", "sample", "paths", "seed", "threads"}
        if extra:
            raise ConfigError(f"unknown top-level config key(s): {', '.join(sorted(extra))}")
        return cls(
            profile=_build(CodecProfile, d.get("profile"), "profile"),
            model=_build(ModelConfig, d.get("model"), "model"),
            train=_build(TrainConfig, d.get("train"), "train"),
            sample=_build(SampleConfig, d.get("sample"), "sample"),
            paths=dict(d.get("paths") or {}),
            seed=int(d.get("seed", 0)),
            threads=int(d.get("threads", 1)),
        )

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e

    def with_seed(self, seed: int) -> RunConfig:
        """Apply one seed everywhere a component takes one."""
        return replace(
            self,
            seed=seed,
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed),
            sample=replace(self.sample, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.resolved().to_dict(),
            "sample": self.sample.to_dict(),
            "paths": dict(self.paths),
            "seed": self.seed,
            "threads": self.threads,
        }

    def write_resolved(self, out_dir, command: str) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / RESOLVED_NAME
        path.write_text(json.dumps({"command": command, **self.to_dict()}, indent=1, sort_keys=True) + "\n")
        return path
