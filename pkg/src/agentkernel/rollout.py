"""The multi-turn episode loop.

Each turn: render the transcript, ask the policy for at most the remaining token
budget, parse the emission, then either execute the tool call and append its
observation or stop on a final answer. Parse failures end the episode as
``invalid``; tool failures become error observations and the episode goes on.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import requests

from .images import BlobStore
from .toolbox import Toolbox
from .toolbox.errors import InfrastructureError
from .toolbox.http import auth_headers
from .toolbox.image_search import format_results_text
from .transcript import (
    SCHEMA_VERSION,
    FinalAnswer,
    ModelTurn,
    ParseError,
    PolicyRequest,
    PromptItem,
    ToolCall,
    Transcript,
    append_event,
    canonical_json,
    parse_model_turn,
    render_for_policy,
    start_transcript,
    transcript_from_dict,
    transcript_to_dict,
)

log = logging.getLogger(__name__)

STATUSES = ("answered", "turn_limit", "budget_exhausted", "invalid")


@dataclass(frozen=True)
class RolloutLimits:
    max_turns: int = 10
    max_tokens_per_turn: int = 8192
    max_tokens_total: int = 32768

    def __post_init__(self):
        if min(self.max_turns, self.max_tokens_per_turn, self.max_tokens_total) <= 0:
            raise ValueError("rollout limits must be positive")
        if self.max_tokens_per_turn > self.max_tokens_total:
            raise ValueError("per-turn token limit exceeds the trajectory limit")


@dataclass(frozen=True)
class Budget:
    per_turn: int
    remaining_total: int

    @property
    def exhausted(self) -> bool:
        return self.per_turn <= 0


def check_budgets(consumed: int, limits: RolloutLimits) -> Budget:
    remaining = limits.max_tokens_total - consumed
    return Budget(per_turn=min(limits.max_tokens_per_turn, remaining), remaining_total=remaining)


# --------------------------------------------------------------------------- policy clients


class PolicyTransportError(InfrastructureError):
    pass


class PolicyContractError(InfrastructureError):
    """The client reported more tokens than it was granted, or misaligned log-probs."""


class RolloutAborted(InfrastructureError):
    def __init__(self, message: str, prompt_id: str = "", seed: int | None = None):
        super().__init__(message)
        self.prompt_id = prompt_id
        self.seed = seed


@dataclass(frozen=True)
class Generation:
    text: str
    token_count: int
    logprobs: tuple[float, ...] | None = None


class PolicyClient(Protocol):
    def generate(self, request: PolicyRequest, token_budget: int) -> Generation: ...


def whitespace_token_count(text: str) -> int:
    return max(1, len(text.split()))


class ScriptedPolicy:
    """Deterministic policy for tests and offline fixtures.

    ``script`` is either a callable ``(request) -> str | Generation`` or a
    mapping from item id to a list of variants, each variant being the list of
    raw emissions for successive turns. Variant ``seed % len(variants)`` is
    used; the key ``"*"`` is the fallback for unknown ids. Past the end of a
    variant the last emission repeats.
    """

    def __init__(self, script, token_counter: Callable[[str], int] = whitespace_token_count):
        self.script = script
        self.token_counter = token_counter

    def generate(self, request: PolicyRequest, token_budget: int) -> Generation:
        if callable(self.script):
            out = self.script(request)
        else:
            item_id = request.metadata.get("item_id")
            variants = self.script.get(item_id, self.script.get("*"))
            if not variants:
                raise PolicyTransportError(f"no script for item {item_id!r}")
            if isinstance(variants[0], str):
                variants = [variants]
            turns = variants[request.seed % len(variants)]
            out = turns[min(request.turn_index, len(turns) - 1)]
        if isinstance(out, Generation):
            return out
        if isinstance(out, dict):
            return Generation(out["text"], int(out["token_count"]), tuple(out["logprobs"]) if out.get("logprobs") else None)
        return Generation(out, min(self.token_counter(out), token_budget))

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedPolicy":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


class HttpPolicyClient:
    """``POST {messages, attachments, tools, max_tokens, temperature, seed}`` -> ``{text, token_count, logprobs?}``."""

    def __init__(self, url: str, timeout: float = 600.0, session: requests.Session | None = None):
        self.url = url
        self.timeout = timeout
        self.session = session or requests.Session()

    def generate(self, request: PolicyRequest, token_budget: int) -> Generation:
        payload = request.to_dict(inline_images=True)
        payload["max_tokens"] = token_budget
        try:
            resp = self.session.post(self.url, json=payload, timeout=self.timeout, headers=auth_headers())
            resp.raise_for_status()
            data = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise PolicyTransportError(f"policy endpoint {self.url}: {exc}") from exc
        lp = data.get("logprobs")
        return Generation(data["text"], int(data["token_count"]), tuple(lp) if lp is not None else None)


# --------------------------------------------------------------------------- trajectories


@dataclass
class TurnRecord:
    raw: str
    token_count: int
    logprobs: tuple[float, ...] | None = None
    turn: ModelTurn | None = None
    error_kind: str | None = None
    error_message: str | None = None
    error_span: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        d = {"raw": self.raw, "token_count": self.token_count, "logprobs": list(self.logprobs) if self.logprobs else None}
        d["error"] = (
            None if self.error_kind is None
            else {"kind": self.error_kind, "message": self.error_message, "span": list(self.error_span or (0, 0))}
        )
        return d


@dataclass
class Trajectory:
    prompt_id: str
    transcript: Transcript
    turns: list[TurnRecord]
    status: str
    seed: int
    answer: str | None = None
    reward: object | None = None  # reward.RewardBreakdown
    prompt: PromptItem | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if (self.status == "answered") != (self.answer is not None):
            raise ValueError("status 'answered' iff an answer is present")

    @property
    def tokens_total(self) -> int:
        return sum(t.token_count for t in self.turns)

    def tool_calls(self) -> list[ToolCall]:
        return [t.action for t in self.transcript.model_turns() if isinstance(t.action, ToolCall)]

    def to_dict(self, blobs: BlobStore | None = None) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "prompt_id": self.prompt_id,
            "seed": self.seed,
            "status": self.status,
            "answer": self.answer,
            "tokens_total": self.tokens_total,
            "turns": [t.to_dict() for t in self.turns],
            "transcript": transcript_to_dict(self.transcript, blobs),
            "reward": self.reward.to_dict() if self.reward is not None else None,
        }

    def to_json_line(self, blobs: BlobStore | None = None, **extra) -> str:
        d = self.to_dict(blobs)
        d.update(extra)
        return canonical_json(d)

    @classmethod
    def from_dict(cls, data: dict, blobs: BlobStore) -> "Trajectory":
        from .reward import RewardBreakdown

        transcript = transcript_from_dict(data["transcript"], blobs)
        model_turns = iter(transcript.model_turns())
        turns = []
        for d in data["turns"]:
            err = d.get("error")
            turns.append(
                TurnRecord(
                    raw=d["raw"],
                    token_count=d["token_count"],
                    logprobs=tuple(d["logprobs"]) if d.get("logprobs") else None,
                    turn=None if err else next(model_turns),
                    error_kind=err["kind"] if err else None,
                    error_message=err["message"] if err else None,
                    error_span=tuple(err["span"]) if err else None,
                )
            )
        reward = RewardBreakdown.from_dict(data["reward"]) if data.get("reward") else None
        return cls(data["prompt_id"], transcript, turns, data["status"], data["seed"], data.get("answer"), reward)


@dataclass
class Group:
    prompt: PromptItem
    members: list[Trajectory]
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def usable(self) -> bool:
        """Complete, failure-free and large enough for group-relative advantages."""
        return not self.failures and len(self.members) >= 2


class TrajectoryStore:
    """Append-only JSONL, one trajectory per line. Thread-safe appends."""

    def __init__(self, path: str | Path, blobs: BlobStore | None = None):
        self.path = Path(path)
        self.blobs = blobs or BlobStore(self.path.parent / "blobs")
        self._lock = threading.Lock()

    def append(self, trajectory: Trajectory, **extra) -> None:
        line = trajectory.to_json_line(self.blobs, **extra)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def __iter__(self) -> Iterator[Trajectory]:
        for record in read_jsonl(self.path):
            yield Trajectory.from_dict(record, self.blobs)


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


# --------------------------------------------------------------------------- the loop


def _looks_untagged(raw: str) -> bool:
    return not any(tag in raw for tag in ("<think>", "<answer>", "<tool_call>", "</think>", "</answer>", "</tool_call>"))


def _generate(policy: PolicyClient, request: PolicyRequest, budget: int, prompt_id: str, seed: int) -> Generation:
    for attempt in (1, 2):
        try:
            gen = policy.generate(request, budget)
            break
        except PolicyTransportError as exc:
            log.warning("policy transport failure for %s seed %d (attempt %d): %s", prompt_id, seed, attempt, exc)
            if attempt == 2:
                raise RolloutAborted(f"policy transport failed twice: {exc}", prompt_id, seed) from exc
    if gen.token_count < 0 or gen.token_count > budget:
        raise PolicyContractError(f"policy reported {gen.token_count} tokens against a budget of {budget}")
    if gen.logprobs is not None and len(gen.logprobs) != gen.token_count:
        raise PolicyContractError("log-probs are not aligned with the generated tokens")
    return gen


def run_rollout(prompt: PromptItem, policy: PolicyClient, tools: Toolbox, limits: RolloutLimits = RolloutLimits(),
                seed: int = 0, *, workflow: str = "agentic", temperature: float = 0.0,
                rag_results: str | None = None) -> Trajectory:
    """Run one episode to a terminal status.

    Raises :class:`InfrastructureError` (policy transport after one retry, tool
    backend outage, cache miss); such episodes are never scored.
    """
    if workflow == "rag" and rag_results is None and tools.image_backend is not None and prompt.images:
        rag_results = format_results_text(tools.image_backend.search(prompt.images[0]))
    transcript = start_transcript(prompt, workflow, rag_results)
    turns: list[TurnRecord] = []
    consumed = 0
    status, answer = "turn_limit", None
    for turn_index in range(limits.max_turns):
        budget = check_budgets(consumed, limits)
        if budget.exhausted:
            status = "budget_exhausted"
            break
        request = render_for_policy(transcript, tools=tools.schemas).with_budget(
            budget.per_turn, seed=seed, temperature=temperature,
            metadata={"item_id": prompt.id, "turn": turn_index},
        )
        gen = _generate(policy, request, budget.per_turn, prompt.id, seed)
        consumed += gen.token_count
        record = TurnRecord(gen.text, gen.token_count, gen.logprobs)
        turns.append(record)
        if not tools.schemas and _looks_untagged(gen.text) and gen.text.strip():
            turn = ModelTurn("", FinalAnswer(gen.text.strip()), raw=gen.text, protocol=False)
        else:
            try:
                turn = parse_model_turn(gen.text, tools.schemas)
            except ParseError as exc:
                record.error_kind, record.error_message, record.error_span = exc.kind, str(exc), exc.span
                status = "invalid"
                break
        record.turn = turn
        transcript = append_event(transcript, turn)
        if isinstance(turn.action, FinalAnswer):
            status, answer = "answered", turn.action.text
            break
        obs = tools.execute(turn.action, transcript.registry, question=prompt.question)
        transcript = append_event(transcript, obs)
    return Trajectory(prompt.id, transcript, turns, status, seed, answer, prompt=prompt)


def run_group(prompt: PromptItem, policy: PolicyClient, tools: Toolbox, limits: RolloutLimits = RolloutLimits(),
              G: int = 8, base_seed: int = 0, *, workflow: str = "agentic", temperature: float = 0.0,
              max_workers: int = 1) -> Group:
    """``G`` independent rollouts with seeds ``base_seed .. base_seed+G-1``, ordered by seed."""
    if G < 1:
        raise ValueError("group size must be >= 1")
    seeds = list(range(base_seed, base_seed + G))

    def one(seed):
        try:
            return run_rollout(prompt, policy, tools, limits, seed, workflow=workflow, temperature=temperature)
        except InfrastructureError as exc:
            return exc

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    members, failures = [], {}
    for seed, res in zip(seeds, results):
        if isinstance(res, Exception):
            failures[seed] = f"{type(res).__name__}: {res}"
        else:
            members.append(res)
    return Group(prompt, members, failures)


def rollout_all(items: Sequence[PromptItem], policy: PolicyClient, tools: Toolbox, limits: RolloutLimits, G: int,
                base_seed: int = 0, **kwargs) -> list[Group]:
    return [run_group(item, policy, tools, limits, G, base_seed, **kwargs) for item in items]
