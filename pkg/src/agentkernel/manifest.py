"""Run manifests: every artifact a command writes points back to one of these."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, prompts
from .transcript import canonical_json


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    inputs: dict = field(default_factory=dict)  # name -> content hash
    parameters: dict = field(default_factory=dict)
    prompt_assets: dict = field(default_factory=prompts.asset_hashes)
    argv: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    started: str = field(default_factory=_now)
    finished: str | None = None
    version: str = __version__

    @property
    def id(self) -> str:
        """Stable across reruns: covers what determines the outputs, not when or where they were written."""
        material = {
            "command": self.command,
            "config_hash": self.config_hash,
            "inputs": self.inputs,
            "parameters": self.parameters,
            "prompt_assets": self.prompt_assets,
            "version": self.version,
        }
        return hashlib.sha256(canonical_json(material).encode()).hexdigest()[:16]

    def write(self, artifact: str | Path) -> Path:
        self.finished = _now()
        path = Path(str(artifact) + ".manifest.json")
        data = {"id": self.id, **asdict(self)}
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
