import json

import numpy as np
import pytest

from agentkernel.images import BlobStore
from agentkernel.rollout import (
    Generation,
    HttpPolicyClient,
    PolicyContractError,
    PolicyTransportError,
    RolloutAborted,
    RolloutLimits,
    ScriptedPolicy,
    Trajectory,
    TrajectoryStore,
    check_budgets,
    run_group,
    run_rollout,
)
from agentkernel.toolbox import Toolbox
from agentkernel.transcript import FinalAnswer, ModelTurn, Observation, PromptItem, ToolCall
from policies import CROP, FuzzPolicy, answer, call

IMG = (np.arange(40 * 60 * 3) % 251).astype(np.uint8).reshape(40, 60, 3)
ITEM = PromptItem("q1", "What landmark is this?", (IMG,), "Eiffel Tower")


def tools():
    return Toolbox()


def test_budget_examples():
    limits = RolloutLimits()
    assert check_budgets(0, limits).per_turn == 8192
    assert check_budgets(30000, limits).per_turn == 2768
    assert check_budgets(32768, limits).exhausted
    assert not check_budgets(32767, limits).exhausted


def test_limits_validation():
    with pytest.raises(ValueError):
        RolloutLimits(max_turns=0)
    with pytest.raises(ValueError):
        RolloutLimits(max_tokens_per_turn=40000)


def test_answer_on_first_turn():
    t = run_rollout(ITEM, ScriptedPolicy({"*": [answer("Eiffel Tower")]}), tools())
    assert t.status == "answered" and t.answer == "Eiffel Tower" and len(t.turns) == 1


def test_crop_every_turn_hits_turn_limit():
    t = run_rollout(ITEM, ScriptedPolicy({"*": [CROP]}), tools())
    assert t.status == "turn_limit" and len(t.turns) == 10 and t.answer is None
    assert len(t.transcript.registry) == 11
    assert len(t.tool_calls()) == 10


def test_untagged_text_is_invalid():
    t = run_rollout(ITEM, ScriptedPolicy({"*": ["It is the Eiffel Tower."]}), tools())
    assert t.status == "invalid" and len(t.turns) == 1
    assert t.turns[0].error_kind == "MissingThink"


def test_tool_errors_do_not_invalidate():
    bad = call("crop_image", {"bbox": [0.5, 0.5, 0.5, 0.9], "image_index": 1})
    t = run_rollout(ITEM, ScriptedPolicy({"*": [bad, answer("Eiffel Tower")]}), tools())
    assert t.status == "answered" and len(t.turns) == 2
    obs = [e for e in t.transcript.events if isinstance(e, Observation)]
    assert obs[0].is_error


def test_budget_exhaustion():
    policy = ScriptedPolicy(lambda req: Generation(CROP, req.max_tokens))
    t = run_rollout(ITEM, policy, tools())
    assert t.status == "budget_exhausted"
    assert [r.token_count for r in t.turns] == [8192] * 4 and t.tokens_total == 32768


def test_small_remaining_budget_is_offered():
    seen = []

    def script(req):
        seen.append(req.max_tokens)
        return Generation(CROP, min(req.max_tokens, 7500))

    run_rollout(ITEM, ScriptedPolicy(script), tools())
    assert seen[:5] == [8192, 8192, 8192, 8192, 2768]


def test_overreported_tokens_violate_the_contract():
    with pytest.raises(PolicyContractError):
        run_rollout(ITEM, ScriptedPolicy(lambda req: Generation(CROP, req.max_tokens + 1)), tools())
    with pytest.raises(PolicyContractError):
        run_rollout(ITEM, ScriptedPolicy(lambda req: Generation(CROP, 3, (-0.1,))), tools())


class Flaky:
    def __init__(self, failures):
        self.failures = failures
        self.calls = 0

    def generate(self, request, token_budget):
        self.calls += 1
        if self.calls <= self.failures:
            raise PolicyTransportError("connection reset")
        return Generation(answer("Paris"), 3)


def test_transport_failure_retried_once_then_aborts():
    p = Flaky(1)
    assert run_rollout(ITEM, p, tools()).status == "answered" and p.calls == 2
    p = Flaky(2)
    with pytest.raises(RolloutAborted) as info:
        run_rollout(ITEM, p, tools(), seed=5)
    assert p.calls == 2 and info.value.seed == 5 and info.value.prompt_id == "q1"


def test_group_alternating_by_seed_parity():
    policy = ScriptedPolicy({"*": [[answer("Eiffel Tower")], [CROP]]})
    group = run_group(ITEM, policy, tools(), G=4, base_seed=0)
    assert [m.status for m in group.members] == ["answered", "turn_limit", "answered", "turn_limit"]
    assert [m.seed for m in group.members] == [0, 1, 2, 3]
    # each member against the same policy individually
    for m in group.members:
        assert run_rollout(ITEM, policy, tools(), seed=m.seed).status == m.status
    assert group.usable


def test_group_sizes_and_failures():
    group = run_group(ITEM, ScriptedPolicy({"*": [answer("x")]}), tools(), G=8)
    assert len(group.members) == 8 and {m.status for m in group.members} == {"answered"}
    assert not run_group(ITEM, ScriptedPolicy({"*": [answer("x")]}), tools(), G=1).usable

    class FailOdd:
        def generate(self, request, token_budget):
            if request.seed % 2:
                raise PolicyTransportError("down")
            return Generation(answer("x"), 2)

    group = run_group(ITEM, FailOdd(), tools(), G=4)
    assert sorted(group.failures) == [1, 3] and not group.usable
    with pytest.raises(ValueError):
        run_group(ITEM, FailOdd(), tools(), G=0)


def test_group_order_independent_of_workers():
    policy = FuzzPolicy(7)
    a = run_group(ITEM, policy, tools(), G=6, max_workers=1)
    b = run_group(ITEM, FuzzPolicy(7), tools(), G=6, max_workers=4)
    assert [m.to_json_line() for m in a.members] == [m.to_json_line() for m in b.members]


def check_invariants(t: Trajectory, limits: RolloutLimits):
    assert len(t.turns) <= limits.max_turns
    assert t.tokens_total <= limits.max_tokens_total
    events = t.transcript.events
    for i, e in enumerate(events):
        if isinstance(e, ModelTurn) and isinstance(e.action, ToolCall):
            assert i + 1 < len(events) and isinstance(events[i + 1], Observation)
    if t.status == "answered":
        assert isinstance(events[-1], ModelTurn) and isinstance(events[-1].action, FinalAnswer)


def test_fuzzed_rollouts_respect_bounds():
    limits = RolloutLimits()
    statuses = set()
    for s in range(150):
        policy = FuzzPolicy(s)
        t = run_rollout(ITEM, policy, tools(), limits, seed=s)
        check_invariants(t, limits)
        assert max(policy.budgets) <= 8192
        statuses.add(t.status)
    assert statuses == {"answered", "turn_limit", "budget_exhausted", "invalid"}


def test_identical_seeds_give_identical_bytes(tmp_path):
    for run in ("a", "b"):
        store = TrajectoryStore(tmp_path / run / "traj.jsonl", BlobStore(tmp_path / run / "blobs"))
        for s in range(12):
            store.append(run_rollout(ITEM, FuzzPolicy(3), tools(), seed=s))
    assert (tmp_path / "a" / "traj.jsonl").read_bytes() == (tmp_path / "b" / "traj.jsonl").read_bytes()
    back = list(TrajectoryStore(tmp_path / "a" / "traj.jsonl", BlobStore(tmp_path / "a" / "blobs")))
    assert len(back) == 12
    again = "\n".join(t.to_json_line(BlobStore(tmp_path / "a" / "blobs")) for t in back) + "\n"
    assert again.encode() == (tmp_path / "a" / "traj.jsonl").read_bytes()


def test_direct_workflow_accepts_plain_text_and_rejects_tool_calls():
    direct = tools().restricted([])
    t = run_rollout(ITEM, ScriptedPolicy({"*": ["Eiffel Tower"]}), direct, workflow="direct")
    assert t.status == "answered" and t.answer == "Eiffel Tower"
    t = run_rollout(ITEM, ScriptedPolicy({"*": [CROP]}), direct, workflow="direct")
    assert t.status == "invalid" and t.turns[0].error_kind == "UnknownTool"


def test_http_policy_client(stub):
    seen = []

    def gen(data):
        seen.append(data)
        return {"text": answer("Eiffel Tower"), "token_count": 4, "logprobs": [-0.1, -0.2, -0.3, -0.4]}

    stub.json_route("/generate", gen)
    t = run_rollout(ITEM, HttpPolicyClient(stub.base + "/generate", timeout=5), tools(), seed=9)
    assert t.status == "answered" and t.turns[0].logprobs == (-0.1, -0.2, -0.3, -0.4)
    assert seen[0]["max_tokens"] == 8192 and seen[0]["seed"] == 9
    assert "png_base64" in seen[0]["attachments"][0]
    stub.json_route("/generate", lambda d: (500, {"error": "boom"}))
    with pytest.raises(RolloutAborted):
        run_rollout(ITEM, HttpPolicyClient(stub.base + "/generate", timeout=5), tools())


def test_trajectory_record_fields():
    t = run_rollout(ITEM, ScriptedPolicy({"*": [CROP, answer("Eiffel Tower")]}), tools(), seed=2)
    d = json.loads(t.to_json_line())
    assert d["status"] == "answered" and d["seed"] == 2 and d["tokens_total"] == t.tokens_total
    assert [x["error"] for x in d["turns"]] == [None, None]
    with pytest.raises(ValueError):
        Trajectory("q", t.transcript, t.turns, "answered", 0, None)
    with pytest.raises(ValueError):
        Trajectory("q", t.transcript, t.turns, "done", 0, "x")
