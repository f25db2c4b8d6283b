"""Tool registry: image crop, text search and reverse image search."""

from __future__ import annotations

import threading
from collections import Counter

from ..schemas import ALL_SCHEMAS, WORKFLOW_TOOLS, ToolSchema, schemas_for, validate_tool_call
from ..transcript import ContentPart, ImageRegistry, Observation, ToolCall
from .cache import ToolCache, cache_key, canonicalize
from .crop import BBox, crop_image, pixel_window, resolve_crop
from .errors import BackendUnavailable, CacheMiss, IndexOutOfRange, InfrastructureError, InvalidBBox, ToolError
from .image_search import (
    CachedImageBackend,
    LiveImageBackend,
    SearchResult,
    image_search,
    image_search_key,
    store_image_results,
)
from .text_search import (
    CachedTextBackend,
    ChatSummarizer,
    Document,
    IdentitySummarizer,
    LiveTextBackend,
    LocalCorpusBackend,
    SummarizedObservation,
    store_text_results,
    text_search,
)

__all__ = [
    "ALL_SCHEMAS", "BBox", "BackendUnavailable", "CacheMiss", "CachedImageBackend", "CachedTextBackend",
    "ChatSummarizer", "Document", "IdentitySummarizer", "IndexOutOfRange", "InfrastructureError", "InvalidBBox",
    "LiveImageBackend", "LiveTextBackend", "LocalCorpusBackend", "SearchResult", "SummarizedObservation",
    "ToolCache", "ToolError", "ToolSchema", "Toolbox", "cache_key", "canonicalize", "crop_image", "image_search",
    "image_search_key", "pixel_window", "resolve_crop", "schemas_for", "store_image_results", "store_text_results", "text_search",
    "validate_tool_call",
]


class Toolbox:
    """Executes validated tool calls against one trajectory's image registry.

    Backends are shared across trajectories; ``calls`` counts backend requests
    per tool so callers can assert that a workflow never touched a backend.
    """

    def __init__(self, tools=("web_search", "crop_image", "image_search"), *, text_backend=None, summarizer=None,
                 image_backend=None, include_thumbnails: bool = True, max_observation_chars: int | None = 30000):
        self.schemas: tuple[ToolSchema, ...] = schemas_for(tools)
        self.text_backend = text_backend
        self.summarizer = summarizer or IdentitySummarizer()
        self.image_backend = image_backend
        self.include_thumbnails = include_thumbnails
        self.max_observation_chars = max_observation_chars
        self.calls: Counter = Counter()
        self._lock = threading.Lock()

    @classmethod
    def for_workflow(cls, workflow: str, **kwargs) -> "Toolbox":
        return cls(WORKFLOW_TOOLS[workflow], **kwargs)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.schemas)

    def restricted(self, names) -> "Toolbox":
        """Same backends and counters, fewer tools."""
        tb = Toolbox(tuple(n for n in self.names if n in set(names)), text_backend=self.text_backend,
                     summarizer=self.summarizer, image_backend=self.image_backend,
                     include_thumbnails=self.include_thumbnails, max_observation_chars=self.max_observation_chars)
        tb.calls, tb._lock = self.calls, self._lock
        return tb

    def _count(self, name: str):
        with self._lock:
            self.calls[name] += 1

    def execute(self, call: ToolCall, registry: ImageRegistry, question: str | None = None) -> Observation:
        """Run one call. Recoverable tool failures come back as error observations;
        :class:`InfrastructureError` propagates."""
        violation = validate_tool_call(call.name, call.arguments, self.schemas)
        if violation is not None:
            return Observation.text(f"{call.name} error: {violation.message}", is_error=True)
        try:
            if call.name == "crop_image":
                obs = resolve_crop(call, registry)
            elif call.name == "web_search":
                if self.text_backend is None:
                    raise BackendUnavailable("no text search backend configured")
                self._count("web_search")
                obs = text_search(call.arguments["query"], self.text_backend, self.summarizer, question).to_observation()
            elif call.name == "image_search":
                if self.image_backend is None:
                    raise BackendUnavailable("no image search backend configured")
                index = call.arguments.get("image_index", 1)
                if not 1 <= index <= len(registry):
                    raise IndexOutOfRange(f"image_index {index} out of range 1..{len(registry)}")
                self._count("image_search")
                obs = image_search(index, registry, self.image_backend, self.include_thumbnails)
            else:
                raise ToolError(f"unknown tool {call.name!r}")
        except ToolError as exc:
            return Observation.text(f"{call.name} error: {exc}", is_error=True)
        return self._cap(obs)

    def _cap(self, obs: Observation) -> Observation:
        if self.max_observation_chars is None:
            return obs
        budget = self.max_observation_chars
        parts = []
        for p in obs.parts:
            if p.kind == "text":
                text = p.text[: max(budget, 0)]
                budget -= len(text)
                parts.append(ContentPart.of_text(text))
            else:
                parts.append(p)
        return Observation(tuple(parts), obs.is_error)
