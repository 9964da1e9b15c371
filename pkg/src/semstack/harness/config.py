"""Experiment configuration: JSON in, validated dataclasses out.

Schema (every key optional, unknown keys rejected)::

    {
      "dataset":    {DatasetConfig fields, "source"/"target": {DomainParams fields}},
      "train":      {TrainConfig fields},
      "modes":      ["baseline", "synth_only", "synth_enc", "synth_enc_dec"],
      "seeds":      [1, 2, 3],
      "output_dir": "runs/default"
    }
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..synthgen import DatasetConfig
from ..trainer import MODES, TrainConfig

LADDER = ("baseline", "synth_only", "synth_enc", "synth_enc_dec")
_TOP_KEYS = {"dataset", "train", "modes", "seeds", "output_dir"}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: list[str] = field(default_factory=lambda: list(LADDER))
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    output_dir: str = "runs/default"

    def validate(self) -> None:
        try:
            self.dataset.validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError("dataset", str(exc)) from exc
        try:
            self.train.for_mode(self.train.mode).validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError("train", str(exc)) from exc
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError("modes", f"unknown modes {bad}; allowed {list(MODES)}")
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError("modes", "duplicate mode")
        if any(not isinstance(s, int) or s < 0 or s >= 2 ** 64 for s in self.seeds):
            raise ConfigError("seeds", "seeds must be unsigned 64-bit integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", "duplicate seed")

    def to_dict(self) -> dict:
        return {"dataset": self.dataset.to_dict(), "train": asdict(self.train),
                "modes": list(self.modes), "seeds": list(self.seeds), "output_dir": self.output_dir}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        kwargs = {}
        try:
            kwargs["dataset"] = DatasetConfig.from_dict(d.get("dataset", {}))
        except (ValueError, TypeError) as exc:
            raise ConfigError("dataset", str(exc)) from exc
        try:
            kwargs["train"] = TrainConfig.from_dict(d.get("train", {}))
        except (ValueError, TypeError) as exc:
            raise ConfigError("train", str(exc)) from exc
        for key in ("modes", "seeds"):
            if key in d:
                if not isinstance(d[key], list):
                    raise ConfigError(key, "must be a list")
                kwargs[key] = list(d[key])
        if "output_dir" in d:
            if not isinstance(d["output_dir"], str):
                raise ConfigError("output_dir", "must be a string")
            kwargs["output_dir"] = d["output_dir"]
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read and validate a config file; ``None`` gives the defaults."""
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)
