"""Sequence-level clipped policy objectives and their analytic gradients.

Three objectives share one data model:

* ``bn_gspo_objective``: length-normalized sequence ratio, advantages
  standardized within each group and then across the whole minibatch;
* ``gspo_objective``: the same without the minibatch stage;
* ``grpo_objective``: per-token ratios with group-standardized advantages.

All three subtract ``beta`` times a per-token k3 KL estimate against a frozen
reference. Gradients are taken with respect to the current policy's per-token
log-probabilities only; advantages are constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np


class OptimizerError(ValueError):
    pass


class EmptyMask(OptimizerError):
    pass


class GroupTooSmall(OptimizerError):
    pass


class BatchTooSmall(OptimizerError):
    pass


class MissingRef(OptimizerError):
    pass


class MissingLogProbs(OptimizerError):
    pass


class IncompleteBatch(OptimizerError):
    def __init__(self, message: str, prompt_ids: Sequence[str] = ()):
        super().__init__(f"{message}: {', '.join(prompt_ids)}" if prompt_ids else message)
        self.prompt_ids = list(prompt_ids)


@dataclass(frozen=True)
class OptimizerConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28
    beta: float = 1e-4
    group_size: int | None = None
    std_convention: str = "population"
    degenerate_std_epsilon: float = 1e-8
    batch_norm_enabled: bool = True
    # recorded for manifests only; nothing here takes a parameter step
    learning_rate: float = 1e-6
    global_batch_size: int = 128

    def __post_init__(self):
        if not (0 < self.eps_low < 1 and 0 < self.eps_high < 1):
            raise ValueError("clip epsilons must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.group_size is not None and self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.std_convention != "population":
            raise ValueError("only the population std convention is supported")


@dataclass(frozen=True)
class SequenceLogProbs:
    """Aligned per-token log-probs; ``mask`` marks policy-generated tokens."""

    new_lp: np.ndarray
    old_lp: np.ndarray
    ref_lp: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        new = np.asarray(self.new_lp, dtype=np.float64)
        old = np.asarray(self.old_lp, dtype=np.float64)
        ref = None if self.ref_lp is None else np.asarray(self.ref_lp, dtype=np.float64)
        mask = np.ones(new.shape, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if new.ndim != 1 or old.shape != new.shape or mask.shape != new.shape or (ref is not None and ref.shape != new.shape):
            raise OptimizerError("log-prob arrays and mask must be 1-D and equally long")
        if not mask.any():
            raise EmptyMask("sequence has no policy-generated tokens")
        for arr in (new, old) + ((ref,) if ref is not None else ()):
            if not np.all(np.isfinite(arr)) or np.any(arr > 0):
                raise OptimizerError("log-probs must be finite and <= 0")
        object.__setattr__(self, "new_lp", new)
        object.__setattr__(self, "old_lp", old)
        object.__setattr__(self, "ref_lp", ref)
        object.__setattr__(self, "mask", mask)

    @property
    def length(self) -> int:
        return int(self.mask.sum())

    def with_new(self, new_lp) -> "SequenceLogProbs":
        return replace(self, new_lp=np.asarray(new_lp, dtype=np.float64))


@dataclass
class GroupBatch:
    """One prompt's G sampled responses and their scalar rewards."""

    rewards: Sequence[float]
    sequences: Sequence[SequenceLogProbs]
    prompt_id: str = ""

    def __post_init__(self):
        if len(self.rewards) != len(self.sequences):
            raise IncompleteBatch("rewards and sequences differ in length", [self.prompt_id])


@dataclass
class AdvantageSet:
    group_normalized: list[np.ndarray]
    batch_normalized: list[np.ndarray] | None = None

    @property
    def effective(self) -> list[np.ndarray]:
        return self.batch_normalized if self.batch_normalized is not None else self.group_normalized


@dataclass
class ObjectiveResult:
    value: float
    grad: list[list[np.ndarray]]
    diagnostics: dict = field(default_factory=dict)
    advantages: AdvantageSet | None = None

    def report(self) -> dict:
        adv = self.advantages
        return {
            "value": self.value,
            "clip_fraction": self.diagnostics["clip_fraction"],
            "mean_ratio": self.diagnostics["mean_ratio"],
            "kl_value": self.diagnostics["kl_value"],
            "per_group_advantages": [a.tolist() for a in adv.effective] if adv else [],
        }


# --------------------------------------------------------------------------- building blocks


def sequence_ratio(seq: SequenceLogProbs) -> float:
    diff = (seq.new_lp - seq.old_lp)[seq.mask]
    return math.exp(float(np.sum(diff)) / diff.size)


def _standardize(values: np.ndarray, config: OptimizerConfig) -> np.ndarray:
    std = float(np.std(values))
    if std < config.degenerate_std_epsilon:
        return np.zeros_like(values)
    return (values - float(np.mean(values))) / std


def group_normalize(rewards: Iterable[float], config: OptimizerConfig = OptimizerConfig()) -> np.ndarray:
    r = np.asarray(list(rewards), dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall(f"group of {r.size} cannot be standardized")
    return _standardize(r, config)


def batch_normalize(group_advantages: Sequence[np.ndarray], config: OptimizerConfig = OptimizerConfig(),
                    centered: bool = False) -> list[np.ndarray]:
    """Standardize group-normalized advantages over the flattened minibatch.

    ``centered=True`` declares the input zero-mean by construction (every group
    already standardized or zeroed), so the mean is taken as exactly 0 rather
    than as rounding noise; degenerate groups then stay exactly zero.
    """
    sizes = [len(a) for a in group_advantages]
    if sum(sizes) < 2:
        raise BatchTooSmall("batch normalization needs at least two values")
    flat = np.concatenate([np.asarray(a, dtype=np.float64) for a in group_advantages])
    if centered:
        std = math.sqrt(math.fsum(flat * flat) / flat.size)
        flat = np.zeros_like(flat) if std < config.degenerate_std_epsilon else flat / std
    else:
        flat = _standardize(flat, config)
    out, start = [], 0
    for n in sizes:
        out.append(flat[start : start + n])
        start += n
    return out


def compute_advantages(batch: Sequence[GroupBatch], config: OptimizerConfig) -> AdvantageSet:
    ga = [group_normalize(g.rewards, config) for g in batch]
    return AdvantageSet(ga, batch_normalize(ga, config, centered=True) if config.batch_norm_enabled else None)


def _k3(seq: SequenceLogProbs) -> tuple[float, np.ndarray]:
    """Masked-mean k3 estimate and its gradient w.r.t. ``new_lp``."""
    if seq.ref_lp is None:
        raise MissingRef("sequence has no reference log-probs")
    d = (seq.ref_lp - seq.new_lp)[seq.mask]
    em1 = np.expm1(d)  # exp(d) - 1 without cancellation near d = 0
    n = d.size
    grad = np.zeros_like(seq.new_lp)
    grad[seq.mask] = -em1 / n
    return float(np.sum(em1 - d)) / n, grad


def kl_penalty(seqs: SequenceLogProbs | Iterable[SequenceLogProbs]) -> float:
    """k3 estimator averaged over masked tokens, then over sequences."""
    if isinstance(seqs, SequenceLogProbs):
        seqs = [seqs]
    vals = [_k3(s)[0] for s in seqs]
    return float(np.sum(vals)) / len(vals)


def _check_batch(batch: Sequence[GroupBatch], config: OptimizerConfig) -> int:
    if not batch:
        raise IncompleteBatch("empty minibatch")
    sizes = {len(g.sequences) for g in batch}
    expected = config.group_size or max(sizes)
    bad = [g.prompt_id for g in batch if len(g.sequences) != expected]
    if bad:
        raise IncompleteBatch(f"groups must all have {expected} members", bad)
    if expected < 2:
        raise GroupTooSmall("optimization needs groups of at least 2")
    if config.beta > 0 and any(s.ref_lp is None for g in batch for s in g.sequences):
        raise MissingRef("beta > 0 requires reference log-probs for every sequence")
    return expected


def _kl_terms(batch, config, n_seq):
    """(kl_value, per-sequence gradient of -beta * kl_value)."""
    have_ref = all(s.ref_lp is not None for g in batch for s in g.sequences)
    grads = [[np.zeros_like(s.new_lp) for s in g.sequences] for g in batch]
    if not have_ref:
        return 0.0, grads
    total = []
    for gi, g in enumerate(batch):
        for si, s in enumerate(g.sequences):
            v, dv = _k3(s)
            total.append(v)
            grads[gi][si] = -config.beta * dv / n_seq
    return float(np.sum(total)) / n_seq, grads


def _clip_branch(ratio: float | np.ndarray, adv, config: OptimizerConfig):
    """Surrogate value and a mask of where the unclipped branch is active (ties count as unclipped)."""
    clipped = np.clip(ratio, 1.0 - config.eps_low, 1.0 + config.eps_high)
    unclipped_val = ratio * adv
    clipped_val = clipped * adv
    active = unclipped_val <= clipped_val
    return np.where(active, unclipped_val, clipped_val), active


# --------------------------------------------------------------------------- objectives


def bn_gspo_objective(batch: Sequence[GroupBatch], config: OptimizerConfig = OptimizerConfig()) -> ObjectiveResult:
    """Clipped sequence-level surrogate minus ``beta`` times KL.

    With ``config.batch_norm_enabled`` false this is plain GSPO.
    """
    G = _check_batch(batch, config)
    B = len(batch)
    n_seq = B * G
    adv = compute_advantages(batch, config)
    kl_value, grads = _kl_terms(batch, config, n_seq)
    terms, ratios, n_clipped = [], [], 0
    for gi, g in enumerate(batch):
        for si, s in enumerate(g.sequences):
            a = float(adv.effective[gi][si])
            ratio = sequence_ratio(s)
            val, active = _clip_branch(ratio, a, config)
            terms.append(float(val))
            ratios.append(ratio)
            if active:
                grads[gi][si][s.mask] += ratio * a / s.length / n_seq
            else:
                n_clipped += 1
    surrogate = float(np.sum(terms)) / n_seq
    return ObjectiveResult(
        value=surrogate - config.beta * kl_value,
        grad=grads,
        diagnostics={"clip_fraction": n_clipped / n_seq, "mean_ratio": float(np.mean(ratios)),
                     "kl_value": kl_value, "surrogate": surrogate},
        advantages=adv,
    )


def gspo_objective(batch: Sequence[GroupBatch], config: OptimizerConfig = OptimizerConfig()) -> ObjectiveResult:
    return bn_gspo_objective(batch, replace(config, batch_norm_enabled=False))


def grpo_objective(batch: Sequence[GroupBatch], config: OptimizerConfig = OptimizerConfig()) -> ObjectiveResult:
    """Token-level ratios, clipped per token, averaged over masked tokens then over sequences."""
    config = replace(config, batch_norm_enabled=False)
    G = _check_batch(batch, config)
    B = len(batch)
    n_seq = B * G
    adv = compute_advantages(batch, config)
    kl_value, grads = _kl_terms(batch, config, n_seq)
    terms, ratio_sum, n_tokens, n_clipped = [], 0.0, 0, 0
    for gi, g in enumerate(batch):
        for si, s in enumerate(g.sequences):
            a = float(adv.group_normalized[gi][si])
            rho = np.exp((s.new_lp - s.old_lp)[s.mask])
            val, active = _clip_branch(rho, a, config)
            terms.append(float(np.sum(val)) / s.length)
            g_tok = np.where(active, rho * a, 0.0) / s.length / n_seq
            grads[gi][si][s.mask] += g_tok
            ratio_sum += float(np.sum(rho))
            n_tokens += s.length
            n_clipped += int(np.sum(~active))
    surrogate = float(np.sum(terms)) / n_seq
    return ObjectiveResult(
        value=surrogate - config.beta * kl_value,
        grad=grads,
        diagnostics={"clip_fraction": n_clipped / n_tokens, "mean_ratio": ratio_sum / n_tokens,
                     "kl_value": kl_value, "surrogate": surrogate},
        advantages=adv,
    )


OBJECTIVES = {"bn-gspo": bn_gspo_objective, "gspo": gspo_objective, "grpo": grpo_objective}


# --------------------------------------------------------------------------- batch assembly


def _reward_of(record: dict) -> float:
    r = record.get("reward")
    if isinstance(r, dict):
        return float(r["total"])
    if r is None:
        raise MissingLogProbs(f"record for {record.get('prompt_id')!r} has no reward")
    return float(r)


def sequence_from_record(record: dict) -> SequenceLogProbs:
    """Read ``logprobs: {new, old, ref?, mask?}`` from a batch line.

    When ``old`` is absent, the sampling-time per-turn log-probs of a persisted
    trajectory are concatenated instead.
    """
    lp = record.get("logprobs") or {}
    old = lp.get("old")
    if old is None and record.get("turns"):
        per_turn = [t.get("logprobs") for t in record["turns"]]
        if all(p is not None for p in per_turn):
            old = [x for p in per_turn for x in p]
    if lp.get("new") is None or old is None:
        raise MissingLogProbs(f"record for {record.get('prompt_id')!r} lacks new/old log-probs")
    return SequenceLogProbs(lp["new"], old, lp.get("ref"), lp.get("mask"))


def assemble_groups(records: Iterable[dict], group_size: int | None = None) -> list[GroupBatch]:
    """Group batch lines by prompt id, preserving first-appearance order."""
    by_id: dict[str, list[dict]] = {}
    for rec in records:
        by_id.setdefault(str(rec["prompt_id"]), []).append(rec)
    if not by_id:
        raise IncompleteBatch("no records")
    expected = group_size or max(len(v) for v in by_id.values())
    bad = [pid for pid, recs in by_id.items() if len(recs) != expected]
    if bad:
        raise IncompleteBatch(f"incomplete groups (expected {expected} members each)", bad)
    return [
        GroupBatch([_reward_of(r) for r in recs], [sequence_from_record(r) for r in recs], pid)
        for pid, recs in by_id.items()
    ]
