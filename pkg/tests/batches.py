"""Random minibatches in both the package's types and the oracle's plain lists."""

from __future__ import annotations

import numpy as np

from agentkernel.optimizer import GroupBatch, SequenceLogProbs

REWARD_LEVELS = (0.0, 0.5, 1.0, 1.5)


def reflect(x: np.ndarray, lo=-5.0, hi=-0.01) -> np.ndarray:
    """Fold values back into [lo, hi] so that no two arrays share clamped entries."""
    x = np.where(x > hi, 2 * hi - x, x)
    return np.where(x < lo, 2 * lo - x, x)


def random_batch(rng: np.random.Generator, max_b=4, max_g=4, max_len=16, with_ref=True, spread=0.4):
    """Oracle-form batch: ``[(rewards, [(new, old, ref, mask), ...]), ...]``.

    Log-probs lie in [-5, -0.01]. ``spread`` controls how far new departs
    from old, which sets how often sequences land on the clipped side.
    """
    B = int(rng.integers(1, max_b + 1))
    G = int(rng.integers(2, max_g + 1))
    batch = []
    for _ in range(B):
        rewards = [float(x) for x in rng.choice(REWARD_LEVELS, size=G)]
        seqs = []
        for _ in range(G):
            n = int(rng.integers(1, max_len + 1))
            old = rng.uniform(-5.0, -0.01, n)
            new = reflect(old + rng.normal(0.0, spread, n))
            ref = reflect(new + rng.normal(0.0, 0.3, n)) if with_ref else None
            mask = rng.random(n) < 0.8
            if not mask.any():
                mask[int(rng.integers(n))] = True
            seqs.append((new.tolist(), old.tolist(), None if ref is None else ref.tolist(), mask.tolist()))
        batch.append((rewards, seqs))
    return batch


def to_groups(batch) -> list[GroupBatch]:
    return [
        GroupBatch(rewards, [SequenceLogProbs(new, old, ref, mask) for new, old, ref, mask in seqs], f"p{b}")
        for b, (rewards, seqs) in enumerate(batch)
    ]
