"""Text search: retrieve the top pages, summarize each, then summarize the summaries."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path
from typing import Protocol, Sequence

from .. import prompts
from ..transcript import Observation
from .cache import ToolCache, cache_key
from .errors import BackendUnavailable
from .http import DEFAULT_TIMEOUT, ChatClient, post_json, request_with_retry

TOP_K = 5
PAGE_CHAR_LIMIT = 30000


@dataclass(frozen=True)
class Document:
    title: str
    url: str
    body: str

    def to_dict(self) -> dict:
        return {"title": self.title, "url": self.url, "body": self.body}


@dataclass(frozen=True)
class SummarizedObservation:
    query: str
    titles: tuple[str, ...]
    per_page_summaries: tuple[str, ...]
    holistic_summary: str

    def __post_init__(self):
        if len(self.per_page_summaries) > TOP_K:
            raise ValueError("at most five page summaries")
        if self.per_page_summaries and not self.holistic_summary.strip():
            raise ValueError("holistic summary required when pages were retrieved")

    @property
    def empty(self) -> bool:
        return not self.per_page_summaries

    def to_observation(self) -> Observation:
        if self.empty:
            return Observation.text(f'web_search: no results for "{self.query}".')
        lines = [f'web_search results for "{self.query}":']
        for i, (title, summary) in enumerate(zip(self.titles, self.per_page_summaries), 1):
            lines.append(f"[{i}] {title}\n{summary}")
        lines.append(f"Overall summary:\n{self.holistic_summary}")
        return Observation.text("\n\n".join(lines))


class Summarizer(Protocol):
    def summarize(self, content: str, question: str) -> str: ...


class IdentitySummarizer:
    """Echoes its input; useful for fixtures and offline tests."""

    def summarize(self, content: str, question: str) -> str:
        return content


class ChatSummarizer:
    def __init__(self, client: ChatClient):
        self.client = client

    def summarize(self, content: str, question: str) -> str:
        user = prompts.load("summarizer_user").format(content=content, question=question)
        return self.client.complete(
            prompts.load("summarizer_system"), [{"role": "user", "content": user}], temperature=0.0
        )


class TextBackend(Protocol):
    def search(self, query: str, k: int = TOP_K) -> list[Document]: ...


class CachedTextBackend:
    """Offline backend reading pre-fetched documents from the tool cache."""

    def __init__(self, cache: ToolCache):
        self.cache = cache

    def search(self, query: str, k: int = TOP_K) -> list[Document]:
        key = cache_key("web_search", {"query": query})
        record = self.cache.get(key)
        return [Document(d["title"], d.get("url", ""), d.get("body", "")) for d in record["documents"][:k]]


def store_text_results(cache: ToolCache, query: str, documents: Sequence[Document]) -> str:
    key = cache_key("web_search", {"query": query})
    cache.put(key, {"tool": "web_search", "query": query, "documents": [d.to_dict() for d in documents]})
    return key


_TOKEN = re.compile(r"[a-z0-9]+")


def _terms(text: str) -> set[str]:
    return set(_TOKEN.findall(text.lower()))


class LocalCorpusBackend:
    """Ranks documents in a directory by query-term overlap.

    ``.txt``/``.md`` files use the first line as title; ``.json`` files hold
    ``{title, url, body}``. Ties break by file name, zero-overlap documents are
    never returned.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.documents: list[Document] = []
        for path in sorted(self.root.iterdir()):
            if path.suffix == ".json":
                d = json.loads(path.read_text(encoding="utf-8"))
                self.documents.append(Document(d["title"], d.get("url", path.name), d["body"]))
            elif path.suffix in (".txt", ".md"):
                text = path.read_text(encoding="utf-8")
                title = text.split("\n", 1)[0].strip() or path.stem
                self.documents.append(Document(title, path.name, text))
        self._terms = [_terms(d.title + " " + d.body) for d in self.documents]

    def search(self, query: str, k: int = TOP_K) -> list[Document]:
        q = _terms(query)
        scored = [(len(q & terms), i) for i, terms in enumerate(self._terms)]
        scored = sorted((s for s in scored if s[0] > 0), key=lambda s: (-s[0], s[1]))
        return [self.documents[i] for _, i in scored[:k]]


class _TextExtractor(HTMLParser):
    _SKIP = {"script", "style", "noscript", "template"}

    def __init__(self):
        super().__init__()
        self.chunks: list[str] = []
        self._depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP:
            self._depth += 1

    def handle_endtag(self, tag):
        if tag in self._SKIP and self._depth:
            self._depth -= 1

    def handle_data(self, data):
        if not self._depth and data.strip():
            self.chunks.append(data.strip())


def html_to_text(html: str) -> str:
    """Static HTML to text; scripts are dropped, nothing is rendered."""
    parser = _TextExtractor()
    parser.feed(html)
    return "\n".join(parser.chunks)


class LiveTextBackend:
    """Web search API ``POST {query} -> [{title, url, snippet}]`` plus static page fetches.

    Pages that fail to download are dropped rather than replaced by snippets.
    """

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT, fetch_pages: bool = True):
        self.url = url
        self.timeout = timeout
        self.fetch_pages = fetch_pages

    def search(self, query: str, k: int = TOP_K) -> list[Document]:
        data = post_json(self.url, {"query": query}, timeout=self.timeout)
        results = data.get("results", data) if isinstance(data, dict) else data
        docs = []
        for r in list(results)[:k]:
            body = r.get("snippet", "")
            if self.fetch_pages and r.get("url"):
                try:
                    resp = request_with_retry("GET", r["url"], timeout=self.timeout)
                except BackendUnavailable:
                    continue
                body = html_to_text(resp.text)
            docs.append(Document(r.get("title", ""), r.get("url", ""), body))
        return docs


def _join_summaries(titles: Sequence[str], summaries: Sequence[str]) -> str:
    return "\n\n".join(f"[{i}] {t}\n{s}" for i, (t, s) in enumerate(zip(titles, summaries), 1))


def text_search(query: str, backend: TextBackend, summarizer: Summarizer, question: str | None = None,
                k: int = TOP_K, page_chars: int = PAGE_CHAR_LIMIT) -> SummarizedObservation:
    """Top-``k`` retrieval, per-page summaries of the first ``page_chars`` characters, one holistic summary.

    ``question`` is what the summarizer is told the user asked; it defaults to
    the query itself.
    """
    if not query.strip():
        raise ValueError("empty query")
    k = min(k, TOP_K)
    question = question or query
    docs = backend.search(query, k)[:k]
    if not docs:
        return SummarizedObservation(query, (), (), "")
    summaries = tuple(summarizer.summarize(d.body[:page_chars], question) for d in docs)
    titles = tuple(d.title for d in docs)
    holistic = summarizer.summarize(_join_summaries(titles, summaries)[:page_chars], question)
    return SummarizedObservation(query, titles, summaries, holistic)
