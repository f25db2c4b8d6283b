"""Reverse image search over a registered image."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from ..images import decode_image_bytes, encode_png, image_hash
from ..transcript import ContentPart, ImageRegistry, Observation
from .cache import ToolCache, cache_key
from .errors import BackendUnavailable, IndexOutOfRange
from .http import DEFAULT_TIMEOUT, request_with_retry

TOP_K = 5
NO_RESULTS = "image_search: no visually similar results were found."


@dataclass(frozen=True)
class SearchResult:
    title: str
    url: str = ""
    snippet: str = ""
    thumbnail: np.ndarray | None = None

    def __post_init__(self):
        if not self.title.strip():
            raise ValueError("SearchResult.title must be non-empty")


class ImageBackend(Protocol):
    def search(self, image: np.ndarray, k: int = TOP_K) -> list[SearchResult]: ...


def image_search_key(image: np.ndarray) -> str:
    # the index only selects the image; the pixels are the identity
    return cache_key("image_search", {}, image_hash(image))


class CachedImageBackend:
    """Reads pre-fetched results keyed by image content hash.

    A missing key raises :class:`CacheMiss`; a present key with an empty result
    list is a legitimate "nothing similar" answer.
    """

    def __init__(self, cache: ToolCache):
        self.cache = cache

    def search(self, image: np.ndarray, k: int = TOP_K) -> list[SearchResult]:
        record = self.cache.get(image_search_key(image))
        out = []
        for r in record["results"][:k]:
            thumb = self.cache.blobs.get(r["thumbnail"]) if r.get("thumbnail") else None
            out.append(SearchResult(r["title"], r.get("url", ""), r.get("snippet", ""), thumb))
        return out


def store_image_results(cache: ToolCache, image: np.ndarray, results: list[SearchResult]) -> str:
    key = image_search_key(image)
    entries = []
    for r in results:
        entry = {"title": r.title, "url": r.url, "snippet": r.snippet, "thumbnail": None}
        if r.thumbnail is not None:
            entry["thumbnail"] = cache.blobs.put(r.thumbnail)
        entries.append(entry)
    cache.put(key, {"tool": "image_search", "image_hash": image_hash(image), "results": entries})
    return key


class LiveImageBackend:
    """Image upload ``POST multipart(image) -> [{title, thumbnail_url, url?}]``; thumbnails are downloaded."""

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT):
        self.url = url
        self.timeout = timeout

    def search(self, image: np.ndarray, k: int = TOP_K) -> list[SearchResult]:
        resp = request_with_retry(
            "POST", self.url, timeout=self.timeout, files={"image": ("image.png", encode_png(image), "image/png")}
        )
        data = resp.json()
        results = data.get("results", data) if isinstance(data, dict) else data
        out = []
        for r in list(results)[:k]:
            if not r.get("title"):
                continue
            thumb = None
            if r.get("thumbnail_url"):
                try:
                    thumb = decode_image_bytes(
                        request_with_retry("GET", r["thumbnail_url"], timeout=self.timeout).content
                    )
                except BackendUnavailable:
                    thumb = None
            out.append(SearchResult(r["title"], r.get("url", ""), r.get("snippet", ""), thumb))
        return out


def format_results_text(results: list[SearchResult]) -> str:
    if not results:
        return NO_RESULTS
    return "\n".join(f"{i}. {r.title}" for i, r in enumerate(results, 1))


def image_search(image_index: int, registry: ImageRegistry, backend: ImageBackend,
                 include_thumbnails: bool = True, k: int = TOP_K) -> Observation:
    """Titles as text; thumbnails, when included, become new image references.

    Thumbnail ``i`` (1-based among those present) is announced as image
    ``registry.next_index + i - 1``, the index it receives on append.
    """
    if not isinstance(image_index, int) or not 1 <= image_index <= len(registry):
        raise IndexOutOfRange(f"image_index {image_index} out of range 1..{len(registry)}")
    results = backend.search(registry[image_index], k)[:k]
    if not results:
        return Observation.text(NO_RESULTS)
    parts = [ContentPart.of_text(f"Reverse image search results for image {image_index}:")]
    next_index = registry.next_index
    for i, r in enumerate(results, 1):
        if include_thumbnails and r.thumbnail is not None:
            parts.append(ContentPart.of_text(f"\n{i}. {r.title} (thumbnail: image {next_index})\n"))
            parts.append(ContentPart.of_image(r.thumbnail))
            next_index += 1
        else:
            parts.append(ContentPart.of_text(f"\n{i}. {r.title}"))
    return Observation(tuple(parts))
