"""Content-addressed tool cache: one JSON file per (tool, canonical arguments, image hash)."""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from pathlib import Path
from typing import Any

from ..images import BlobStore
from ..transcript import canonical_json
from .errors import CacheMiss

_KEY_RE = re.compile(r"[0-9a-f]{64}")


def canonicalize(value: Any) -> Any:
    """Sorted keys happen at dump time; this normalizes number formatting (2.0 -> 2)."""
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        return int(value) if value.is_integer() else value
    if isinstance(value, dict):
        return {str(k): canonicalize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [canonicalize(v) for v in value]
    raise TypeError(f"cannot canonicalize {type(value).__name__}")


def cache_key(tool: str, arguments: dict, image_hash: str | None = None) -> str:
    material = canonical_json({"tool": tool, "arguments": canonicalize(arguments), "image_hash": image_hash})
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class ToolCache:
    """Directory of ``<key>.json`` records plus a ``blobs/`` image store.

    Safe for concurrent readers and writers: writes go through a temp file and an
    atomic rename, and a key's content is a pure function of its inputs.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.blobs = BlobStore(self.root / "blobs")

    def path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def has(self, key: str) -> bool:
        return self.path(key).exists()

    def get(self, key: str) -> dict:
        try:
            return json.loads(self.path(key).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CacheMiss(key) from None

    def put(self, key: str, record: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(record))
        os.replace(tmp, self.path(key))

    def keys(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(p.stem for p in self.root.glob("*.json") if _KEY_RE.fullmatch(p.stem))
