"""Interaction history and the strict parser for policy emissions.

A policy emission is accepted only in one of two shapes (surrounding whitespace
aside)::

    <think>...</think><tool_call>{"name": ..., "arguments": {...}}</tool_call>
    <think>...</think><answer>...</answer>

Everything else raises a :class:`ParseError` subclass that carries the offending
character span of the raw text.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence, Union

import numpy as np

from . import prompts
from .images import BlobStore, as_image, image_hash
from .schemas import ToolSchema, validate_tool_call

SCHEMA_VERSION = 1
WORKFLOWS = ("agentic", "direct", "rag")

_TAGS = ("think", "tool_call", "answer")
_OPEN_RE = re.compile(r"<(think|tool_call|answer)>")
_ACTION_BLOCK_RE = re.compile(r"<(tool_call|answer)>(.*?)</\1>", re.DOTALL)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


# --------------------------------------------------------------------------- errors


class ParseError(ValueError):
    kind = "ParseError"

    def __init__(self, message: str, raw: str = "", span: tuple[int, int] = (0, 0)):
        super().__init__(message)
        self.raw = raw
        self.span = span

    @property
    def offending(self) -> str:
        return self.raw[self.span[0] : self.span[1]]


class MissingThink(ParseError):
    kind = "MissingThink"


class MissingAction(ParseError):
    kind = "MissingAction"


class MultipleActions(ParseError):
    kind = "MultipleActions"


class StrayText(ParseError):
    kind = "StrayText"


class BadJson(ParseError):
    kind = "BadJson"


class UnknownTool(ParseError):
    kind = "UnknownTool"


class SchemaViolation(ParseError):
    kind = "SchemaViolation"

    def __init__(self, message, raw="", span=(0, 0), violation=None):
        super().__init__(message, raw, span)
        self.violation = violation


PARSE_ERRORS = (MissingThink, MissingAction, MultipleActions, StrayText, BadJson, UnknownTool, SchemaViolation)


class TranscriptError(Exception):
    pass


class AppendAfterAnswer(TranscriptError):
    pass


class IllegalEvent(TranscriptError):
    pass


class UnresolvedImageIndex(TranscriptError):
    pass


# --------------------------------------------------------------------------- domain types


@dataclass(frozen=True)
class PromptItem:
    id: str
    question: str
    images: tuple = ()
    ground_truth: str = ""
    candidates: tuple[str, ...] = ()
    domain_tag: str | None = None
    options: dict | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("PromptItem.id must be non-empty")
        object.__setattr__(self, "images", tuple(as_image(im) for im in self.images))
        object.__setattr__(self, "candidates", tuple(self.candidates))


@dataclass(frozen=True)
class ImageRegistry:
    """Append-only, 1-based image table. Index 1 is the original input image."""

    entries: tuple = ()

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index: int) -> np.ndarray:
        if not isinstance(index, int) or index < 1 or index > len(self.entries):
            raise IndexError(f"image index {index} out of range 1..{len(self.entries)}")
        return self.entries[index - 1]

    def register(self, image) -> tuple["ImageRegistry", int]:
        new = ImageRegistry(self.entries + (as_image(image),))
        return new, len(new.entries)

    @property
    def next_index(self) -> int:
        return len(self.entries) + 1


@dataclass(frozen=True)
class ContentPart:
    """A text fragment, a registered image reference, or an image awaiting registration."""

    kind: str
    text: str | None = None
    image_index: int | None = None
    payload: Any = field(default=None, compare=False, repr=False)

    @classmethod
    def of_text(cls, text: str) -> "ContentPart":
        return cls("text", text=text)

    @classmethod
    def of_ref(cls, index: int) -> "ContentPart":
        return cls("image_ref", image_index=index)

    @classmethod
    def of_image(cls, image) -> "ContentPart":
        return cls("image", payload=as_image(image))


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict


@dataclass(frozen=True)
class FinalAnswer:
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("FinalAnswer must be non-empty")


@dataclass(frozen=True)
class ModelTurn:
    think: str
    action: Union[ToolCall, FinalAnswer]
    raw: str = field(default="", compare=False)
    # False only for untagged direct-workflow answers, which never earn format reward
    protocol: bool = True

    def __post_init__(self):
        if self.protocol and not self.think.strip():
            raise ValueError("ModelTurn.think must be non-empty")
        if not isinstance(self.action, (ToolCall, FinalAnswer)):
            raise TypeError("ModelTurn.action must be a ToolCall or FinalAnswer")

    @property
    def is_final(self) -> bool:
        return isinstance(self.action, FinalAnswer)


@dataclass(frozen=True)
class UserContent:
    parts: tuple[ContentPart, ...]


@dataclass(frozen=True)
class Observation:
    parts: tuple[ContentPart, ...]
    is_error: bool = False

    @classmethod
    def text(cls, text: str, is_error: bool = False) -> "Observation":
        return cls((ContentPart.of_text(text),), is_error=is_error)

    @property
    def text_content(self) -> str:
        return "".join(p.text or "" for p in self.parts if p.kind == "text")


Event = Union[UserContent, ModelTurn, Observation]


@dataclass(frozen=True)
class Transcript:
    system_prompt: str
    events: tuple = ()
    registry: ImageRegistry = field(default_factory=ImageRegistry)
    workflow: str = "agentic"

    @property
    def last(self):
        return self.events[-1] if self.events else None

    @property
    def finished(self) -> bool:
        return isinstance(self.last, ModelTurn) and self.last.is_final

    def model_turns(self) -> list[ModelTurn]:
        return [e for e in self.events if isinstance(e, ModelTurn)]


# --------------------------------------------------------------------------- parsing


def _scan(raw: str):
    """Split raw text into top-level complete blocks and stray segments."""
    blocks, stray = [], []
    pos, n = 0, len(raw)
    while pos < n:
        m = _OPEN_RE.search(raw, pos)
        if m is None:
            stray.append((pos, n))
            break
        if m.start() > pos:
            stray.append((pos, m.start()))
        tag = m.group(1)
        close = raw.find(f"</{tag}>", m.end())
        if close < 0:
            # unclosed tag: the rest is stray
            stray.append((m.start(), n))
            break
        blocks.append((tag, m.start(), close + len(tag) + 3, m.end(), close))
        pos = close + len(tag) + 3
    stray = [(a, b) for a, b in stray if raw[a:b].strip()]
    return blocks, stray


def parse_model_turn(raw: str, schemas: Iterable[ToolSchema]) -> ModelTurn:
    """Parse one policy emission against the strict tag grammar.

    Checks run in a fixed order: missing think, duplicate think, action count,
    stray text, block order, then the tool-call payload (JSON, tool name,
    argument schema).
    """
    schemas = tuple(schemas)
    blocks, stray = _scan(raw)
    thinks = [b for b in blocks if b[0] == "think"]
    if not thinks:
        raise MissingThink("no <think> block", raw, (0, len(raw)))
    think = thinks[0]
    think_body = raw[think[3] : think[4]]
    if not think_body.strip():
        raise MissingThink("empty <think> block", raw, think[1:3])
    if len(thinks) > 1:
        raise StrayText("duplicate <think> block", raw, thinks[1][1:3])

    actions = [b for b in blocks if b[0] != "think"]
    nested = [(m.start() + think[3], m.end() + think[3]) for m in _ACTION_BLOCK_RE.finditer(think_body)]
    if len(actions) + len(nested) > 1:
        extra = (actions[1][1:3] if len(actions) > 1 else nested[0])
        raise MultipleActions("more than one action block", raw, extra)
    if not actions:
        raise MissingAction("no <tool_call> or <answer> block", raw, (think[2], len(raw)))
    if stray:
        raise StrayText("text outside tagged blocks", raw, stray[0])
    action = actions[0]
    if action[1] < think[1]:
        raise StrayText("action block precedes <think>", raw, action[1:3])

    body = raw[action[3] : action[4]]
    span = action[1:3]
    if action[0] == "answer":
        if not body.strip():
            raise MissingAction("empty <answer> block", raw, span)
        return ModelTurn(think=think_body.strip(), action=FinalAnswer(body.strip()), raw=raw)

    try:
        payload = json.loads(body)
    except json.JSONDecodeError as exc:
        raise BadJson(f"malformed tool_call JSON: {exc.msg}", raw, span) from None
    if not isinstance(payload, dict) or not isinstance(payload.get("name"), str):
        raise SchemaViolation("tool_call must be an object with a string 'name'", raw, span)
    if set(payload) - {"name", "arguments"}:
        raise SchemaViolation(f"unexpected tool_call keys {sorted(set(payload) - {'name', 'arguments'})}", raw, span)
    name = payload["name"]
    arguments = payload.get("arguments", {})
    if name not in {s.name for s in schemas}:
        raise UnknownTool(f"unknown tool {name!r}", raw, span)
    if not isinstance(arguments, dict):
        raise SchemaViolation("tool_call arguments must be an object", raw, span)
    violation = validate_tool_call(name, arguments, schemas)
    if violation is not None:
        raise SchemaViolation(f"{name}: {violation.keyword}: {violation.message}", raw, span, violation)
    return ModelTurn(think=think_body.strip(), action=ToolCall(name, arguments), raw=raw)


def serialize_turn(turn: ModelTurn) -> str:
    """Inverse of :func:`parse_model_turn` for well-formed turns."""
    head = f"<think>{turn.think}</think>\n"
    if isinstance(turn.action, FinalAnswer):
        return head + f"<answer>{turn.action.text}</answer>"
    body = json.dumps({"name": turn.action.name, "arguments": turn.action.arguments}, ensure_ascii=False)
    return head + f"<tool_call>\n{body}\n</tool_call>"


# --------------------------------------------------------------------------- building transcripts


def _register_parts(parts: Sequence[ContentPart], registry: ImageRegistry):
    out = []
    for part in parts:
        if part.kind == "image":
            registry, idx = registry.register(part.payload)
            out.append(ContentPart.of_ref(idx))
        else:
            out.append(part)
    return tuple(out), registry


def append_event(transcript: Transcript, event: Event) -> Transcript:
    """Return a new transcript with ``event`` appended.

    Pending image parts are registered in order and replaced by references.
    """
    last = transcript.last
    if transcript.finished:
        raise AppendAfterAnswer("transcript already ends in a final answer")
    if isinstance(event, UserContent):
        if last is not None:
            raise IllegalEvent("user content is only legal as the first event")
    elif isinstance(event, ModelTurn):
        if last is None or (isinstance(last, ModelTurn)):
            raise IllegalEvent("a model turn must follow user content or an observation")
    elif isinstance(event, Observation):
        if not (isinstance(last, ModelTurn) and isinstance(last.action, ToolCall)):
            raise IllegalEvent("an observation must follow a tool-call turn")
    else:
        raise TypeError(f"not a transcript event: {event!r}")

    registry = transcript.registry
    if isinstance(event, (UserContent, Observation)):
        parts, registry = _register_parts(event.parts, registry)
        event = UserContent(parts) if isinstance(event, UserContent) else Observation(parts, event.is_error)
    return Transcript(transcript.system_prompt, transcript.events + (event,), registry, transcript.workflow)


def _template_text(workflow: str, item: PromptItem, rag_results: str | None) -> str:
    template = prompts.load(f"{workflow}_user").replace("{image}", "")
    fields = {"question": item.question}
    if workflow == "rag":
        fields["image_search_results"] = rag_results or ""
    return template.format(**fields).strip()


def start_transcript(item: PromptItem, workflow: str = "agentic", rag_results: str | None = None) -> Transcript:
    """Open a transcript: workflow system prompt, then the images and question."""
    if workflow not in WORKFLOWS:
        raise ValueError(f"unknown workflow {workflow!r}")
    t = Transcript(system_prompt=prompts.load(f"{workflow}_system"), workflow=workflow)
    parts = tuple(ContentPart.of_image(im) for im in item.images)
    parts += (ContentPart.of_text(_template_text(workflow, item, rag_results)),)
    return append_event(t, UserContent(parts))


# --------------------------------------------------------------------------- rendering


@dataclass(frozen=True)
class PolicyRequest:
    """Serialized history handed to a policy client.

    ``attachments`` holds every registered image in registry order; message
    parts of type ``image`` point at them by 0-based ``slot``.
    """

    messages: tuple
    attachments: tuple = ()
    tools: tuple = ()
    max_tokens: int = 0
    temperature: float = 0.0
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def with_budget(self, max_tokens: int, **kw) -> "PolicyRequest":
        return PolicyRequest(
            self.messages,
            self.attachments,
            self.tools,
            max_tokens,
            kw.get("temperature", self.temperature),
            kw.get("seed", self.seed),
            {**self.metadata, **kw.get("metadata", {})},
        )

    @property
    def turn_index(self) -> int:
        return sum(1 for m in self.messages if m["role"] == "assistant")

    def to_dict(self, inline_images: bool = False) -> dict:
        if inline_images:
            from .images import encode_png_base64

            atts = [{"slot": i, "png_base64": encode_png_base64(a)} for i, a in enumerate(self.attachments)]
        else:
            atts = [{"slot": i, "sha256": image_hash(a)} for i, a in enumerate(self.attachments)]
        return {
            "messages": list(self.messages),
            "attachments": atts,
            "tools": list(self.tools),
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "seed": self.seed,
            "metadata": self.metadata,
        }

    def to_json(self) -> bytes:
        return canonical_json(self.to_dict()).encode("utf-8")


def _render_parts(parts, registry: ImageRegistry) -> list[dict]:
    out = []
    for p in parts:
        if p.kind == "text":
            out.append({"type": "text", "text": p.text})
        elif p.kind == "image_ref":
            if p.image_index is None or not 1 <= p.image_index <= len(registry):
                raise UnresolvedImageIndex(f"image index {p.image_index} not in registry of size {len(registry)}")
            out.append({"type": "image", "slot": p.image_index - 1})
        else:
            raise UnresolvedImageIndex("unregistered image payload in transcript")
    return out


def render_for_policy(transcript: Transcript, workflow: str | None = None, tools: Sequence[ToolSchema] = ()) -> PolicyRequest:
    """Deterministically serialize the history into chat messages."""
    if workflow is not None and workflow not in WORKFLOWS:
        raise ValueError(f"unknown workflow {workflow!r}")
    system = prompts.load(f"{workflow}_system") if workflow else transcript.system_prompt
    messages = [{"role": "system", "content": [{"type": "text", "text": system}]}]
    reg = transcript.registry
    for ev in transcript.events:
        if isinstance(ev, UserContent):
            messages.append({"role": "user", "content": _render_parts(ev.parts, reg)})
        elif isinstance(ev, ModelTurn):
            messages.append({"role": "assistant", "content": [{"type": "text", "text": ev.raw or serialize_turn(ev)}]})
        else:
            messages.append({"role": "tool", "content": _render_parts(ev.parts, reg)})
    return PolicyRequest(
        messages=tuple(messages),
        attachments=reg.entries,
        tools=tuple(s.to_function_dict() for s in tools),
    )


# --------------------------------------------------------------------------- persistence


def _parts_to_json(parts) -> list[dict]:
    out = []
    for p in parts:
        if p.kind == "text":
            out.append({"kind": "text", "text": p.text})
        elif p.kind == "image_ref":
            out.append({"kind": "image_ref", "image_index": p.image_index})
        else:
            raise UnresolvedImageIndex("cannot persist an unregistered image payload")
    return out


def _parts_from_json(items) -> tuple[ContentPart, ...]:
    return tuple(
        ContentPart.of_text(d["text"]) if d["kind"] == "text" else ContentPart.of_ref(int(d["image_index"]))
        for d in items
    )


def action_to_json(action) -> dict:
    if isinstance(action, FinalAnswer):
        return {"type": "answer", "text": action.text}
    return {"type": "tool_call", "name": action.name, "arguments": action.arguments}


def action_from_json(d: dict):
    if d["type"] == "answer":
        return FinalAnswer(d["text"])
    return ToolCall(d["name"], d["arguments"])


def transcript_to_dict(transcript: Transcript, blobs: BlobStore | None = None) -> dict:
    """Canonical JSON form. Images are stored by content hash, never inlined."""
    hashes = []
    for im in transcript.registry.entries:
        hashes.append(blobs.put(im) if blobs is not None else image_hash(im))
    events = []
    for ev in transcript.events:
        if isinstance(ev, UserContent):
            events.append({"type": "user", "parts": _parts_to_json(ev.parts)})
        elif isinstance(ev, ModelTurn):
            events.append(
                {
                    "type": "model_turn",
                    "think": ev.think,
                    "action": action_to_json(ev.action),
                    "raw": ev.raw,
                    "protocol": ev.protocol,
                }
            )
        else:
            events.append({"type": "observation", "parts": _parts_to_json(ev.parts), "is_error": ev.is_error})
    return {
        "schema_version": SCHEMA_VERSION,
        "workflow": transcript.workflow,
        "system_prompt": transcript.system_prompt,
        "images": hashes,
        "events": events,
    }


def transcript_from_dict(data: dict, blobs: BlobStore) -> Transcript:
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported transcript schema_version {data.get('schema_version')!r}")
    registry = ImageRegistry(tuple(blobs.get(h) for h in data["images"]))
    events = []
    for d in data["events"]:
        if d["type"] == "user":
            events.append(UserContent(_parts_from_json(d["parts"])))
        elif d["type"] == "model_turn":
            events.append(ModelTurn(d["think"], action_from_json(d["action"]), d.get("raw", ""), d.get("protocol", True)))
        elif d["type"] == "observation":
            events.append(Observation(_parts_from_json(d["parts"]), d.get("is_error", False)))
        else:
            raise ValueError(f"unknown event type {d['type']!r}")
    return Transcript(data["system_prompt"], tuple(events), registry, data.get("workflow", "agentic"))
