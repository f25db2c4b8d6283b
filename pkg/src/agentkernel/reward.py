"""Trajectory scoring: rule-based format compliance plus judge or exact-match accuracy."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from . import prompts
from .rollout import Trajectory
from .schemas import WORKFLOW_TOOLS, ToolSchema, schemas_for
from .toolbox.errors import InfrastructureError
from .transcript import FinalAnswer, ParseError, ToolCall, parse_model_turn

log = logging.getLogger(__name__)

ACCURACY_REWARD = 1.0
FORMAT_REWARD = 0.5
REWARD_VALUES = (0.0, 0.5, 1.0, 1.5)


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_format: float
    judge_unparseable: bool = False

    def __post_init__(self):
        if self.r_acc not in (0.0, ACCURACY_REWARD) or self.r_format not in (0.0, FORMAT_REWARD):
            raise ValueError(f"reward components out of range: {self}")

    @property
    def total(self) -> float:
        return self.r_acc + self.r_format

    def to_dict(self) -> dict:
        return {"r_acc": self.r_acc, "r_format": self.r_format, "total": self.total,
                "judge_unparseable": self.judge_unparseable}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardBreakdown":
        rb = cls(float(d["r_acc"]), float(d["r_format"]), bool(d.get("judge_unparseable", False)))
        if abs(rb.total - d.get("total", rb.total)) > 0:
            raise ValueError("persisted reward total disagrees with its components")
        return rb


# --------------------------------------------------------------------------- format


def check_format(trajectory: Trajectory, schemas: Sequence[ToolSchema] | None = None) -> bool:
    """True iff every emitted turn re-parses under the strict grammar, every
    non-final turn is a tool call, and an answered episode ends on an answer.

    Episodes cut off by the turn or token limit pass when every turn they did
    emit complied.
    """
    if trajectory.status == "invalid" or not trajectory.turns:
        return False
    if schemas is None:
        schemas = schemas_for(WORKFLOW_TOOLS[trajectory.transcript.workflow])
    parsed = []
    for record in trajectory.turns:
        try:
            parsed.append(parse_model_turn(record.raw, schemas))
        except ParseError:
            return False
    *head, last = parsed
    if any(not isinstance(t.action, ToolCall) for t in head):
        return False
    if trajectory.status == "answered":
        return isinstance(last.action, FinalAnswer)
    return isinstance(last.action, ToolCall)


# --------------------------------------------------------------------------- accuracy


_WRAPPERS = {"(": ")", "[": "]", "{": "}", '"': '"', "'": "'"}
_LETTER = re.compile(r"^[a-z]$")


def normalize_answer(text: str) -> str:
    s = text.strip().lower()
    changed = True
    while changed and s:
        changed = False
        if s[0] in _WRAPPERS and s.endswith(_WRAPPERS[s[0]]) and len(s) >= 2:
            s, changed = s[1:-1].strip(), True
        elif s.endswith("."):
            s, changed = s[:-1].strip(), True
    return s


def exact_match(answer: str | None, ground_truth: str, candidates: Sequence[str] = (), options: dict | None = None) -> bool:
    """Case-insensitive, trimmed equality with ground truth or any candidate.

    Enclosing brackets/quotes and a trailing period are ignored. With
    multiple-choice ``options`` (letter -> text), a lone option letter matches
    its option text and vice versa.
    """
    if answer is None:
        return False
    got = normalize_answer(answer)
    targets = {normalize_answer(t) for t in (ground_truth, *candidates) if t is not None}
    if got in targets:
        return True
    if options:
        opts = {normalize_answer(k): normalize_answer(v) for k, v in options.items()}
        if _LETTER.match(got) and opts.get(got) in targets:
            return True
        for letter, text in opts.items():
            if text == got and letter in targets:
                return True
    return False


class JudgeTransportError(InfrastructureError):
    pass


class ChatLike(Protocol):
    def complete(self, system: str, messages: list[dict], temperature: float = 0.0) -> str: ...


@dataclass(frozen=True)
class JudgeVerdict:
    correct: bool
    reason: str
    raw: str
    unparseable: bool = False
    called: bool = True


_JUDGE_RE = re.compile(r"<judge>\s*(yes|no)\s*</judge>", re.IGNORECASE)
_REASON_RE = re.compile(r"<reason>(.*?)</reason>", re.DOTALL | re.IGNORECASE)


def parse_judge(raw: str) -> JudgeVerdict | None:
    found = _JUDGE_RE.findall(raw)
    if len({f.lower() for f in found}) != 1:
        return None
    reason = _REASON_RE.search(raw)
    return JudgeVerdict(found[0].lower() == "yes", reason.group(1).strip() if reason else "", raw)


def format_ground_truth(ground_truth: str, candidates: Sequence[str] = ()) -> str:
    extra = [c for c in candidates if c != ground_truth]
    if not extra:
        return ground_truth
    return json.dumps([ground_truth, *extra], ensure_ascii=False)


def fill_judge_prompt(question: str, ground_truth: str, answer: str, candidates: Sequence[str] = ()) -> str:
    return prompts.load("judge_user").format(
        question=question, ground_truth_answer=format_ground_truth(ground_truth, candidates), model_response=answer
    )


def judge_accuracy(question: str, ground_truth: str, candidates: Sequence[str], answer: str | None,
                   judge_client: ChatLike) -> JudgeVerdict:
    """Ask the judge at temperature 0. Transport failures and unparseable output
    are each retried once; unparseable twice scores incorrect with a flag."""
    if answer is None:
        return JudgeVerdict(False, "no answer", "", called=False)
    system = prompts.load("judge_system")
    messages = [{"role": "user", "content": fill_judge_prompt(question, ground_truth, answer, candidates)}]
    raw = ""
    for attempt in (1, 2):
        raw = _judge_call(judge_client, system, messages)
        verdict = parse_judge(raw)
        if verdict is not None:
            return verdict
        log.warning("unparseable judge output (attempt %d): %.200r", attempt, raw)
    return JudgeVerdict(False, "unparseable judge output", raw, unparseable=True)


def _judge_call(client: ChatLike, system: str, messages: list[dict]) -> str:
    for attempt in (1, 2):
        try:
            return client.complete(system, messages, temperature=0.0)
        except InfrastructureError as exc:
            if attempt == 2:
                raise JudgeTransportError(f"judge unreachable after retry: {exc}") from exc
    raise AssertionError("unreachable")


# --------------------------------------------------------------------------- assembly


@dataclass
class ScorerConfig:
    """``mode`` is ``"judge"`` or ``"exact_match"``."""

    mode: str = "exact_match"
    judge_client: ChatLike | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("judge", "exact_match"):
            raise ValueError(f"unknown scorer mode {self.mode!r}")
        if self.mode == "judge" and self.judge_client is None:
            raise ValueError("judge mode needs a judge client")


def answer_correct(trajectory: Trajectory, config: ScorerConfig) -> tuple[bool, bool]:
    """(correct, judge_unparseable)."""
    item = trajectory.prompt
    if item is None:
        raise ValueError("trajectory carries no prompt item to score against")
    if trajectory.answer is None:
        return False, False
    if config.mode == "exact_match":
        return exact_match(trajectory.answer, item.ground_truth, item.candidates, item.options), False
    v = judge_accuracy(item.question, item.ground_truth, item.candidates, trajectory.answer, config.judge_client)
    return v.correct, v.unparseable


def score_trajectory(trajectory: Trajectory, config: ScorerConfig) -> RewardBreakdown:
    """Score, attach the breakdown to the trajectory, and return it."""
    r_format = FORMAT_REWARD if check_format(trajectory) else 0.0
    correct, flagged = answer_correct(trajectory, config)
    rb = RewardBreakdown(ACCURACY_REWARD if correct else 0.0, r_format, flagged)
    trajectory.reward = rb
    return rb
