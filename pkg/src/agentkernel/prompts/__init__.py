"""Prompt texts shipped as versioned package assets.

Each workflow has a ``<name>_system.txt`` and ``<name>_user.txt`` pair. Asset
identity is pinned by a git-style blob hash so run manifests can record exactly
which prompt text produced an artifact.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

ASSET_NAMES = (
    "agentic_system",
    "agentic_user",
    "direct_system",
    "direct_user",
    "rag_system",
    "rag_user",
    "judge_system",
    "judge_user",
    "summarizer_system",
    "summarizer_user",
)


@lru_cache(maxsize=None)
def load(name: str) -> str:
    if name not in ASSET_NAMES:
        raise KeyError(f"unknown prompt asset: {name}")
    return resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def blob_hash(text: str) -> str:
    data = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def asset_hashes() -> dict[str, str]:
    return {name: blob_hash(load(name)) for name in ASSET_NAMES}
