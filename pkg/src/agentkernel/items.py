"""Benchmark / training item files: JSONL of prompt items.

Each line::

    {"id": "q1", "question": "...", "images": ["img/q1.png"], "ground_truth": "Paris",
     "candidates": ["Paris, France"], "domain_tag": "geo", "options": {"A": "...", "B": "..."}}

Image entries are paths relative to the item file, or ``blob:<sha256>`` references
into a blob directory.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .images import BlobStore, load_image_file
from .transcript import PromptItem


class ItemFileError(ValueError):
    pass


def item_from_dict(d: dict, base_dir: Path, blobs: BlobStore | None = None) -> PromptItem:
    images = []
    for ref in d.get("images") or []:
        if isinstance(ref, str) and ref.startswith("blob:"):
            if blobs is None:
                raise ItemFileError(f"item {d.get('id')}: blob reference without a blob directory")
            images.append(blobs.get(ref[5:]))
        else:
            p = Path(ref)
            images.append(load_image_file(p if p.is_absolute() else base_dir / p))
    gt = d.get("ground_truth", d.get("answer"))
    if gt is None:
        raise ItemFileError(f"item {d.get('id')}: missing ground_truth")
    return PromptItem(
        id=str(d["id"]),
        question=d["question"],
        images=tuple(images),
        ground_truth=str(gt),
        candidates=tuple(d.get("candidates") or ()),
        domain_tag=d.get("domain_tag"),
        options=d.get("options"),
    )


def load_items(path: str | Path, blobs: BlobStore | None = None) -> list[PromptItem]:
    path = Path(path)
    items, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                item = item_from_dict(json.loads(line), path.parent, blobs)
            except (KeyError, json.JSONDecodeError, FileNotFoundError) as exc:
                raise ItemFileError(f"{path}:{lineno}: {exc}") from exc
            if item.id in seen:
                raise ItemFileError(f"{path}:{lineno}: duplicate id {item.id!r}")
            seen.add(item.id)
            items.append(item)
    return items


def write_items(path: str | Path, items: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in items:
            fh.write(json.dumps(d, ensure_ascii=False) + "\n")
