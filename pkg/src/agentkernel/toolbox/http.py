"""Thin HTTP shims: JSON POST with timeout and one retry, and the chat-completion contract."""

from __future__ import annotations

import logging
import os
from typing import Any

import requests

from .errors import BackendUnavailable

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
API_KEY_ENV = "AGENTKERNEL_API_KEY"


def auth_headers() -> dict:
    key = os.environ.get(API_KEY_ENV)
    return {"Authorization": f"Bearer {key}"} if key else {}


def request_with_retry(method: str, url: str, *, retries: int = 1, timeout: float = DEFAULT_TIMEOUT,
                       session: requests.Session | None = None, **kwargs) -> requests.Response:
    sess = session or requests
    kwargs["headers"] = {**auth_headers(), **(kwargs.get("headers") or {})}
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = sess.request(method, url, timeout=timeout, **kwargs)
            resp.raise_for_status()
            return resp
        except requests.RequestException as exc:
            last = exc
            log.warning("%s %s failed (attempt %d): %s", method, url, attempt + 1, exc)
    raise BackendUnavailable(f"{method} {url}: {last}")


def post_json(url: str, payload: Any, **kwargs) -> Any:
    return request_with_retry("POST", url, json=payload, **kwargs).json()


class ChatClient:
    """Chat-completion endpoint: request ``{system, messages, temperature}``, response ``{text}``.

    Used for both the page summarizer and the judge.
    """

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT, model: str | None = None):
        self.url = url
        self.timeout = timeout
        self.model = model

    def complete(self, system: str, messages: list[dict], temperature: float = 0.0) -> str:
        payload = {"system": system, "messages": messages, "temperature": temperature}
        if self.model:
            payload["model"] = self.model
        data = post_json(self.url, payload, timeout=self.timeout)
        if not isinstance(data, dict) or not isinstance(data.get("text"), str):
            raise BackendUnavailable(f"{self.url}: response lacks a 'text' field")
        return data["text"]
