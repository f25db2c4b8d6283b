"""Kernel configuration: one YAML file, command-line overrides, secrets from the environment.

Example (every key optional; shown values are the defaults)::

    seed: 0
    group_size: 8
    workflow: agentic          # agentic | direct | rag
    scorer: exact_match        # exact_match | judge
    temperature: 0.0
    limits:
      max_turns: 10
      max_tokens_per_turn: 8192
      max_tokens_total: 32768
    optimizer:
      eps_low: 0.2
      eps_high: 0.28
      beta: 1.0e-4
      batch_norm_enabled: true
      learning_rate: 1.0e-6
      global_batch_size: 128
    tools:
      cache_dir: null          # required when offline
      offline: true
      text_backend: cached     # cached | local | live
      corpus_dir: null         # required for the local backend
      include_thumbnails: true
      max_observation_chars: 30000
      timeout: 30.0
    endpoints:                 # http(s) URLs
      policy: null
      judge: null
      summarizer: null
      text_search: null
      image_search: null
    prompt_versions: {}        # asset name -> pinned blob hash

API keys are read from ``AGENTKERNEL_API_KEY`` and never stored in config.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
from urllib.parse import urlparse

import yaml

from . import prompts
from .optimizer import OptimizerConfig
from .rollout import RolloutLimits
from .transcript import WORKFLOWS, canonical_json


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class ToolsConfig:
    cache_dir: str | None = None
    offline: bool = True
    text_backend: str = "cached"
    corpus_dir: str | None = None
    include_thumbnails: bool = True
    max_observation_chars: int | None = 30000
    timeout: float = 30.0


@dataclass(frozen=True)
class Endpoints:
    policy: str | None = None
    judge: str | None = None
    summarizer: str | None = None
    text_search: str | None = None
    image_search: str | None = None


@dataclass(frozen=True)
class KernelConfig:
    limits: RolloutLimits = field(default_factory=RolloutLimits)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    tools: ToolsConfig = field(default_factory=ToolsConfig)
    endpoints: Endpoints = field(default_factory=Endpoints)
    seed: int = 0
    group_size: int = 8
    workflow: str = "agentic"
    scorer: str = "exact_match"
    temperature: float = 0.0
    prompt_versions: dict = field(default_factory=dict)
    base_dir: str = "."

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def snapshot_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_SECTIONS = {"limits": RolloutLimits, "optimizer": OptimizerConfig, "tools": ToolsConfig, "endpoints": Endpoints}


def _build(cls, data: Any, section: str, errors: list[str]):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        errors.append(f"{section}: expected a mapping")
        return cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for k in sorted(set(data) - known):
        errors.append(f"{section}.{k}: unknown key")
    try:
        return cls(**{k: v for k, v in data.items() if k in known})
    except (TypeError, ValueError) as exc:
        errors.append(f"{section}: {exc}")
        return cls()


def _url_ok(url: str) -> bool:
    parsed = urlparse(url)
    return parsed.scheme in ("http", "https") and bool(parsed.netloc)


def build_config(data: dict | None, base_dir: str | Path = ".", overrides: dict | None = None,
                 check_paths: bool = True, needs_tools: bool = True) -> KernelConfig:
    """Validate everything and raise one :class:`ConfigError` listing every problem.

    ``needs_tools=False`` skips the backend/cache requirements for commands
    that never build a toolbox.
    """
    data = dict(data or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        head, _, tail = key.partition(".")
        if tail:
            data.setdefault(head, {})
            data[head] = {**(data[head] or {}), tail: value}
        else:
            data[key] = value
    errors: list[str] = []
    known_top = {f.name for f in dataclasses.fields(KernelConfig)} - {"base_dir"}
    for k in sorted(set(data) - known_top):
        errors.append(f"{k}: unknown key")
    sections = {name: _build(cls, data.get(name), name, errors) for name, cls in _SECTIONS.items()}
    scalars = {k: data[k] for k in ("seed", "group_size", "workflow", "scorer", "temperature") if k in data}
    cfg = KernelConfig(**sections, **scalars, prompt_versions=dict(data.get("prompt_versions") or {}),
                       base_dir=str(base_dir))

    if not isinstance(cfg.seed, int):
        errors.append("seed: must be an integer")
    if not isinstance(cfg.group_size, int) or cfg.group_size < 1:
        errors.append("group_size: must be a positive integer")
    if cfg.workflow not in WORKFLOWS:
        errors.append(f"workflow: must be one of {', '.join(WORKFLOWS)}")
    if cfg.scorer not in ("exact_match", "judge"):
        errors.append("scorer: must be exact_match or judge")
    if cfg.scorer == "judge" and not cfg.endpoints.judge:
        errors.append("scorer: judge mode needs endpoints.judge")
    for name in dataclasses.fields(Endpoints):
        url = getattr(cfg.endpoints, name.name)
        if url is not None and not _url_ok(str(url)):
            errors.append(f"endpoints.{name.name}: malformed URL {url!r}")
    t = cfg.tools
    if not needs_tools:
        check_paths = False
    if t.text_backend not in ("cached", "local", "live"):
        errors.append("tools.text_backend: must be cached, local or live")
    if needs_tools and t.text_backend == "live" and not cfg.endpoints.text_search:
        errors.append("tools.text_backend: live backend needs endpoints.text_search")
    if needs_tools and t.text_backend == "local" and not t.corpus_dir:
        errors.append("tools.corpus_dir: required by the local text backend")
    if needs_tools and t.offline and not t.cache_dir:
        errors.append("tools.cache_dir: required in offline mode")
    if check_paths:
        for key in ("cache_dir", "corpus_dir"):
            p = cfg.resolve(getattr(t, key))
            needed = key == "corpus_dir" and t.text_backend == "local" or key == "cache_dir" and t.offline
            if p is not None and needed and not p.is_dir():
                errors.append(f"tools.{key}: directory {p} does not exist")
    current = prompts.asset_hashes()
    for name, pinned in cfg.prompt_versions.items():
        if name not in current:
            errors.append(f"prompt_versions.{name}: unknown prompt asset")
        elif pinned != current[name]:
            errors.append(f"prompt_versions.{name}: pinned {pinned} but shipped asset is {current[name]}")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | Path | None, overrides: dict | None = None, check_paths: bool = True,
                needs_tools: bool = True) -> KernelConfig:
    if path is None:
        return build_config({}, ".", overrides, check_paths, needs_tools)
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError([f"config file {path} not found"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"config file {path}: {exc}"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"config file {path}: top level must be a mapping"])
    return build_config(data, path.parent, overrides, check_paths, needs_tools)
