import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentkernel.images import BlobStore
from agentkernel.schemas import ALL_SCHEMAS, WORKFLOW_TOOLS, schemas_for
from agentkernel.transcript import (
    PARSE_ERRORS,
    AppendAfterAnswer,
    ContentPart,
    FinalAnswer,
    IllegalEvent,
    ImageRegistry,
    ModelTurn,
    Observation,
    ParseError,
    PromptItem,
    ToolCall,
    Transcript,
    UnresolvedImageIndex,
    UserContent,
    append_event,
    parse_model_turn,
    render_for_policy,
    serialize_turn,
    start_transcript,
    transcript_from_dict,
    transcript_to_dict,
)
from fixtures.parse_corpus import CASES


def classify(raw):
    try:
        turn = parse_model_turn(raw, ALL_SCHEMAS)
    except ParseError as exc:
        return exc.kind
    if isinstance(turn.action, FinalAnswer):
        return ("ok", "answer", turn.action.text)
    return ("ok", "tool_call", turn.action.name)


@pytest.mark.parametrize("raw,expected", CASES, ids=[f"case{i:02d}" for i in range(len(CASES))])
def test_parse_corpus(raw, expected):
    assert classify(raw) == expected


def test_corpus_covers_every_error_class():
    kinds = {e for _, e in CASES if isinstance(e, str)}
    assert kinds == {cls.kind for cls in PARSE_ERRORS}
    assert len(CASES) >= 30


def test_error_spans_point_at_offending_text():
    raw = "<think>ok</think> so the answer is <answer>Paris</answer>"
    with pytest.raises(ParseError) as info:
        parse_model_turn(raw, ALL_SCHEMAS)
    assert info.value.offending.strip() == "so the answer is"
    raw = '<think>x</think><tool_call>{"name": "python"}</tool_call>'
    with pytest.raises(ParseError) as info:
        parse_model_turn(raw, ALL_SCHEMAS)
    assert info.value.offending.startswith("<tool_call>") and info.value.offending.endswith("</tool_call>")


def test_schema_violation_carries_the_failing_keyword():
    raw = '<think>x</think><tool_call>{"name": "crop_image", "arguments": {"bbox": [0.1, 0.2, 0.5], "image_index": 1}}</tool_call>'
    with pytest.raises(ParseError) as info:
        parse_model_turn(raw, ALL_SCHEMAS)
    assert info.value.violation.keyword in ("minItems", "maxItems")
    assert info.value.violation.tool == "crop_image"


def test_restricted_schemas_reject_unregistered_tools():
    raw = '<think>x</think><tool_call>{"name": "image_search"}</tool_call>'
    with pytest.raises(ParseError) as info:
        parse_model_turn(raw, schemas_for(WORKFLOW_TOOLS["rag"]))
    assert info.value.kind == "UnknownTool"
    with pytest.raises(ParseError):
        parse_model_turn('<think>x</think><tool_call>{"name": "web_search", "arguments": {"query": "q"}}</tool_call>', ())


# ---------------------------------------------------------------- round trip

safe_text = st.text(
    alphabet=st.characters(blacklist_characters="<>", blacklist_categories=("Cs",)), min_size=1, max_size=40
).map(str.strip).filter(bool)

bbox = st.tuples(st.floats(0, 0.49), st.floats(0, 0.49), st.floats(0.5, 1), st.floats(0.5, 1)).map(list)
actions = st.one_of(
    safe_text.map(FinalAnswer),
    safe_text.map(lambda q: ToolCall("web_search", {"query": q})),
    st.tuples(bbox, st.integers(1, 9)).map(lambda a: ToolCall("crop_image", {"bbox": a[0], "image_index": a[1]})),
    st.just(ToolCall("image_search", {})),
    st.integers(1, 5).map(lambda i: ToolCall("image_search", {"image_index": i})),
)


@settings(max_examples=300)
@given(safe_text, actions)
def test_serialize_parse_roundtrip(think, action):
    turn = ModelTurn(think, action)
    raw = serialize_turn(turn)
    back = parse_model_turn(raw, ALL_SCHEMAS)
    assert back == turn
    assert serialize_turn(back) == raw


def test_corpus_accepted_cases_roundtrip():
    for raw, expected in CASES:
        if expected[0] != "ok":
            continue
        turn = parse_model_turn(raw, ALL_SCHEMAS)
        assert parse_model_turn(serialize_turn(turn), ALL_SCHEMAS) == turn


# ---------------------------------------------------------------- transcript building

IMG = np.arange(4 * 6 * 3, dtype=np.uint8).reshape(4, 6, 3)


def item(**kw):
    return PromptItem(id="q1", question="Where is this?", images=(IMG,), ground_truth="Paris", **kw)


def test_registry_is_one_based_and_append_only():
    reg = ImageRegistry()
    reg, i = reg.register(IMG)
    reg2, j = reg.register(IMG[:2])
    assert (i, j) == (1, 2)
    assert np.array_equal(reg2[1], IMG) and reg2[2].shape == (2, 6, 3)
    assert len(reg) == 1  # the original is untouched
    with pytest.raises(IndexError):
        reg2[0]
    with pytest.raises(IndexError):
        reg2[3]


def test_start_transcript_registers_input_image():
    t = start_transcript(item())
    assert len(t.registry) == 1
    assert t.events[0].parts[0] == ContentPart.of_ref(1)
    assert "Where is this?" in t.events[0].parts[-1].text
    assert t.system_prompt.startswith("#Role")


def test_append_rules():
    t = start_transcript(item())
    call = ModelTurn("look", ToolCall("crop_image", {"bbox": [0, 0, 0.5, 0.5], "image_index": 1}))
    with pytest.raises(IllegalEvent):
        append_event(t, Observation.text("too early"))
    with pytest.raises(IllegalEvent):
        append_event(t, UserContent((ContentPart.of_text("again"),)))
    t = append_event(t, call)
    with pytest.raises(IllegalEvent):
        append_event(t, call)
    t = append_event(t, Observation((ContentPart.of_text("crop"), ContentPart.of_image(IMG[:2, :3]))))
    assert len(t.registry) == 2
    assert t.events[-1].parts[1] == ContentPart.of_ref(2)
    t = append_event(t, ModelTurn("done", FinalAnswer("Paris")))
    assert t.finished
    with pytest.raises(AppendAfterAnswer):
        append_event(t, Observation.text("late"))


def test_model_turn_invariants():
    with pytest.raises(ValueError):
        ModelTurn("", FinalAnswer("x"))
    with pytest.raises(ValueError):
        FinalAnswer("  ")
    assert ModelTurn("", FinalAnswer("x"), protocol=False).action.text == "x"


def test_render_for_policy_is_deterministic():
    t = start_transcript(item())
    t = append_event(t, ModelTurn("look", ToolCall("crop_image", {"bbox": [0, 0, 0.5, 0.5], "image_index": 1}),
                                  raw="<think>look</think><tool_call>{}</tool_call>"))
    t = append_event(t, Observation((ContentPart.of_text("crop"), ContentPart.of_image(IMG[:2, :3]))))
    req = render_for_policy(t, tools=ALL_SCHEMAS)
    assert [m["role"] for m in req.messages] == ["system", "user", "assistant", "tool"]
    assert req.messages[1]["content"][0] == {"type": "image", "slot": 0}
    assert req.messages[3]["content"][1] == {"type": "image", "slot": 1}
    assert req.messages[2]["content"][0]["text"] == "<think>look</think><tool_call>{}</tool_call>"
    assert len(req.attachments) == 2 and req.turn_index == 1
    assert req.to_json() == render_for_policy(t, tools=ALL_SCHEMAS).to_json()
    assert {tool["function"]["name"] for tool in json.loads(req.to_json())["tools"]} == {s.name for s in ALL_SCHEMAS}


def test_render_rejects_unresolved_indices():
    bad = Transcript("sys", (UserContent((ContentPart.of_ref(3),)),), ImageRegistry((IMG,)))
    with pytest.raises(UnresolvedImageIndex):
        render_for_policy(bad)


def test_workflow_system_prompts_differ():
    for wf in ("agentic", "direct", "rag"):
        t = start_transcript(item(), wf, rag_results="1. Eiffel Tower" if wf == "rag" else None)
        req = render_for_policy(t)
        assert req.messages[0]["content"][0]["text"] == t.system_prompt
    rag = start_transcript(item(), "rag", rag_results="1. Eiffel Tower")
    assert "1. Eiffel Tower" in rag.events[0].parts[-1].text
    assert "image_search" not in rag.system_prompt
    assert "image_search" in start_transcript(item()).system_prompt


def test_persistence_roundtrip(tmp_path):
    blobs = BlobStore(tmp_path / "blobs")
    t = start_transcript(item())
    t = append_event(t, ModelTurn("look", ToolCall("crop_image", {"bbox": [0, 0, 0.5, 0.5], "image_index": 1})))
    t = append_event(t, Observation((ContentPart.of_text("crop"), ContentPart.of_image(IMG[:2, :3]))))
    t = append_event(t, ModelTurn("done", FinalAnswer("Paris")))
    d = transcript_to_dict(t, blobs)
    assert all(len(h) == 64 for h in d["images"])
    back = transcript_from_dict(json.loads(json.dumps(d)), blobs)
    assert back.events == t.events
    assert all(np.array_equal(a, b) for a, b in zip(back.registry.entries, t.registry.entries))
    assert transcript_to_dict(back, blobs) == d
