"""Run manifests: what ran, with which seeds, and digests of what it wrote."""
from __future__ import annotations

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__
from ..rng import ALGORITHM, STREAMS


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    run_id: str = ""
    code_version: str = __version__
    rng_algorithm: str = ALGORITHM
    environment: dict = field(default_factory=lambda: {"python": platform.python_version(), "numpy": np.__version__})
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"
    error: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.run_id:
            self.run_id = f"{self.command}-{config_digest({'command': self.command, 'config': self.config, 'seeds': self.seeds})[:12]}"

    def register(self, root: Path, paths) -> None:
        for p in paths:
            self.outputs[Path(p).relative_to(root).as_posix()] = sha256_file(Path(p))

    def finish(self, status: str = "complete", error: str | None = None) -> None:
        self.status, self.error, self.finished = status, error, _now()

    def write(self, path: Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def substream_table(root_seed: int) -> dict:
    return {"root": root_seed, "streams": dict(STREAMS)}


def read_manifest(path: Path) -> dict:
    return json.loads(Path(path).read_text())
