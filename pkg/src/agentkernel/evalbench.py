"""Benchmark runs, Pass@1 / Avg@k metrics, pass@8 difficulty labels and hard-sample filtering."""

from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .reward import ScorerConfig, answer_correct
from .rollout import PolicyClient, RolloutLimits, Trajectory, run_rollout
from .schemas import WORKFLOW_TOOLS
from .toolbox import CachedImageBackend, Toolbox, image_search_key
from .toolbox.errors import InfrastructureError
from .transcript import WORKFLOWS, PromptItem

log = logging.getLogger(__name__)

PASS_AT_K = 8
TOOL_KEYS = {"crop_image": "crop", "web_search": "text_search", "image_search": "image_search"}


class ConfigurationError(ValueError):
    pass


class MissingCacheEntry(InfrastructureError):
    def __init__(self, item_ids: Sequence[str]):
        super().__init__(f"tool cache lacks image-search entries for items: {', '.join(item_ids)}")
        self.item_ids = list(item_ids)


@dataclass(frozen=True)
class MetricSpec:
    name: str
    k: int
    scorer: str

    @classmethod
    def parse(cls, text: str, k: int | None = None, scorer: str | None = None) -> "MetricSpec":
        """``pass1`` (one rollout, judge) or ``avg@N`` (N rollouts, exact match)."""
        text = text.lower().strip()
        if text in ("pass1", "pass@1"):
            if k not in (None, 1):
                raise ConfigurationError("pass1 uses exactly one rollout per item")
            return cls("pass1", 1, scorer or "judge")
        m = re.fullmatch(r"avg@(\d+)", text)
        if m:
            n = int(m.group(1))
            if k is not None and k != n:
                raise ConfigurationError(f"--k {k} contradicts metric {text}")
            return cls(f"avg@{n}", n, scorer or "exact_match")
        raise ConfigurationError(f"unknown metric {text!r}")


@dataclass
class RolloutOutcome:
    answer: str | None
    correct: bool
    status: str


@dataclass
class EvalRecord:
    item_id: str
    k: int
    outcomes: list[RolloutOutcome] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.outcomes) + len(self.failures) != self.k:
            raise ValueError(f"item {self.item_id}: {len(self.outcomes)} outcomes + {len(self.failures)} failures != k={self.k}")

    @property
    def score(self) -> float | None:
        if not self.outcomes:
            return None
        return sum(o.correct for o in self.outcomes) / len(self.outcomes)

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "k": self.k,
            "score": self.score,
            "outcomes": [{"answer": o.answer, "correct": o.correct, "status": o.status} for o in self.outcomes],
            "failures": self.failures,
        }


def aggregate(records: Sequence[EvalRecord]) -> float:
    scores = [r.score for r in records if r.score is not None]
    return sum(scores) / len(scores) if scores else 0.0


@dataclass
class MetricReport:
    metric: str
    value: float
    records: list[EvalRecord]
    mode: str
    workflow: str = "agentic"

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("metric value outside [0, 1]")
        if self.value != aggregate(self.records):
            raise AssertionError("metric value disagrees with its own per-item records")

    @property
    def infrastructure_failures(self) -> int:
        return sum(len(r.failures) for r in self.records)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "mode": self.mode,
            "workflow": self.workflow,
            "items": len(self.records),
            "infrastructure_failures": self.infrastructure_failures,
            "records": [r.to_dict() for r in self.records],
        }


def item_seed(item_id: str) -> int:
    return int(hashlib.sha256(item_id.encode("utf-8")).hexdigest()[:8], 16)


def check_cache_coverage(items: Iterable[PromptItem], tools: Toolbox) -> None:
    """Fail fast when an offline image-search cache lacks any item's input image."""
    backend = tools.image_backend
    if not isinstance(backend, CachedImageBackend):
        return
    missing = [it.id for it in items if it.images and not backend.cache.has(image_search_key(it.images[0]))]
    if missing:
        raise MissingCacheEntry(missing)


def run_benchmark(items: Sequence[PromptItem], workflow: str, policy: PolicyClient, tools: Toolbox,
                  metric: MetricSpec, scorer: ScorerConfig, limits: RolloutLimits = RolloutLimits(), *,
                  temperature: float = 0.0, max_workers: int = 1, offline: bool = True,
                  trajectory_sink: Callable[[Trajectory], None] | None = None) -> MetricReport:
    """Run ``metric.k`` rollouts per item under ``workflow`` and aggregate.

    Rollouts that fail for infrastructure reasons are listed per item and left
    out of every denominator.
    """
    if not items:
        raise ConfigurationError("no benchmark items")
    if workflow not in WORKFLOWS:
        raise ConfigurationError(f"unknown workflow {workflow!r}")
    if scorer.mode != metric.scorer:
        raise ConfigurationError(f"metric {metric.name} expects scorer {metric.scorer}, got {scorer.mode}")
    toolbox = tools.restricted(WORKFLOW_TOOLS[workflow])
    if offline and workflow in ("agentic", "rag"):
        check_cache_coverage(items, toolbox)

    def evaluate(item: PromptItem) -> EvalRecord:
        base = item_seed(item.id)
        outcomes, failures = [], []
        for i in range(metric.k):
            try:
                traj = run_rollout(item, policy, toolbox, limits, base + i, workflow=workflow, temperature=temperature)
                correct, _ = answer_correct(traj, scorer)
            except InfrastructureError as exc:
                failures.append(f"seed {base + i}: {type(exc).__name__}: {exc}")
                continue
            if trajectory_sink is not None:
                trajectory_sink(traj)
            outcomes.append(RolloutOutcome(traj.answer, correct, traj.status))
        return EvalRecord(item.id, metric.k, outcomes, failures)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            records = list(pool.map(evaluate, items))
    else:
        records = [evaluate(it) for it in items]
    return MetricReport(metric.name, aggregate(records), records, scorer.mode, workflow)


# --------------------------------------------------------------------------- difficulty and filtering

AgentRunner = Callable[[PromptItem, int], Sequence[bool]]


def difficulty_from_outcomes(outcomes: Sequence[bool]) -> str:
    return "easy" if any(outcomes) else "hard"


def classify_difficulty(item: PromptItem, agent_runner: AgentRunner, k: int = PASS_AT_K) -> str:
    """``hard`` when none of ``k`` agentic rollouts is correct, else ``easy``."""
    if k != PASS_AT_K:
        raise ConfigurationError(f"difficulty labels are defined for pass@{PASS_AT_K}, got k={k}")
    outcomes = list(agent_runner(item, k))
    if len(outcomes) != k:
        raise ConfigurationError(f"runner returned {len(outcomes)} outcomes for k={k}")
    return difficulty_from_outcomes(outcomes)


def filter_hard_samples(pool: Sequence[PromptItem], agent_runner: AgentRunner, k: int = PASS_AT_K,
                        max_correct: int = 1) -> list[PromptItem]:
    """Keep items answered correctly at most ``max_correct`` times out of ``k``."""
    kept = []
    for item in pool:
        outcomes = list(agent_runner(item, k))
        if len(outcomes) != k:
            raise ConfigurationError(f"runner returned {len(outcomes)} outcomes for k={k}")
        if sum(bool(o) for o in outcomes) <= max_correct:
            kept.append(item)
    return kept


def make_agent_runner(policy: PolicyClient, tools: Toolbox, scorer: ScorerConfig,
                      limits: RolloutLimits = RolloutLimits(), temperature: float = 0.0) -> AgentRunner:
    """Agentic-workflow runner; infrastructure failures propagate and abort the item."""
    toolbox = tools.restricted(WORKFLOW_TOOLS["agentic"])

    def run(item: PromptItem, k: int) -> list[bool]:
        base = item_seed(item.id)
        out = []
        for i in range(k):
            traj = run_rollout(item, policy, toolbox, limits, base + i, workflow="agentic", temperature=temperature)
            out.append(answer_correct(traj, scorer)[0])
        return out

    return run


# --------------------------------------------------------------------------- tool usage


def _tool_names(trajectory) -> list[str]:
    if isinstance(trajectory, Trajectory):
        return [c.name for c in trajectory.tool_calls()]
    events = trajectory["transcript"]["events"]
    return [e["action"]["name"] for e in events if e["type"] == "model_turn" and e["action"]["type"] == "tool_call"]


def count_tool_calls(trajectories: Iterable) -> dict[str, int]:
    counts = Counter({v: 0 for v in TOOL_KEYS.values()})
    for t in trajectories:
        for name in _tool_names(t):
            counts[TOOL_KEYS.get(name, name)] += 1
    return dict(counts)


def tool_usage_histogram(trajectories: Mapping[str, Iterable] | Iterable) -> dict:
    """Per-benchmark tool counts and per-trajectory call totals, as plain JSON."""
    groups = trajectories if isinstance(trajectories, Mapping) else {"all": trajectories}
    out = {}
    for bench, trajs in groups.items():
        trajs = list(trajs)
        out[bench] = {
            "counts": count_tool_calls(trajs),
            "calls_per_trajectory": [len(_tool_names(t)) for t in trajs],
            "trajectories": len(trajs),
        }
    return {"benchmarks": out}
