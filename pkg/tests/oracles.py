"""Independent reference implementations used only by the tests.

Everything here is written from the formulas and shares no code with the
package. Advantages are computed exactly with sympy (rewards are binary
fractions, so means, variances and square roots stay symbolic); ratios, KL
and finite differences use mpmath at 40 significant digits.

Batches are plain nested lists: ``batch[b] = (rewards, [(new, old, ref, mask), ...])``.
"""

from __future__ import annotations

import mpmath as mp
import sympy as sp

DPS = 40


def exact_standardize(xs, eps=sp.Rational(1, 10**8)):
    xs = [sp.Rational(x) for x in xs]
    n = len(xs)
    m = sp.Add(*xs) / n
    var = sp.Add(*[(x - m) ** 2 for x in xs]) / n
    sd = sp.sqrt(var)
    if sd < eps:
        return [sp.Integer(0)] * n
    return [sp.nsimplify((x - m) / sd) for x in xs]


def exact_advantages(batch, batch_norm: bool):
    group = [exact_standardize(rewards) for rewards, _ in batch]
    if not batch_norm:
        return group
    flat = [a for g in group for a in g]
    n = len(flat)
    m = sp.simplify(sp.Add(*flat) / n)
    sd = sp.sqrt(sp.simplify(sp.Add(*[(a - m) ** 2 for a in flat]) / n))
    if sd < sp.Rational(1, 10**8):
        return [[sp.Integer(0)] * len(g) for g in group]
    out, i = [], 0
    for g in group:
        out.append([sp.simplify((a - m) / sd) for a in flat[i:i + len(g)]])
        i += len(g)
    return out


def advantages(batch, batch_norm: bool):
    """Exact advantages rounded to mpmath numbers at the working precision."""
    return [[mp.mpf(sp.N(a, DPS + 10)) for a in g] for g in exact_advantages(batch, batch_norm)]


def k3(new, ref, mask):
    terms = [mp.exp(mp.mpf(r) - mp.mpf(n)) - (mp.mpf(r) - mp.mpf(n)) - 1
             for n, r, m in zip(new, ref, mask) if m]
    return mp.fsum(terms) / len(terms)


def clip(x, lo, hi):
    return min(max(x, lo), hi)


def sequence_term(kind, new, old, ref, mask, adv, eps_low, eps_high, beta):
    """Contribution of one sequence before dividing by the number of sequences."""
    lo, hi = 1 - mp.mpf(eps_low), 1 + mp.mpf(eps_high)
    diffs = [mp.mpf(n) - mp.mpf(o) for n, o, m in zip(new, old, mask) if m]
    if kind == "grpo":
        rhos = [mp.exp(d) for d in diffs]
        surr = mp.fsum(min(r * adv, clip(r, lo, hi) * adv) for r in rhos) / len(rhos)
    else:
        s = mp.exp(mp.fsum(diffs) / len(diffs))
        surr = min(s * adv, clip(s, lo, hi) * adv)
    kl = k3(new, ref, mask) if (beta and ref is not None) else mp.mpf(0)
    return surr - mp.mpf(beta) * kl


def objective(kind, batch, eps_low=0.2, eps_high=0.28, beta=1e-4):
    with mp.workdps(DPS):
        adv = advantages(batch, batch_norm=(kind == "bn-gspo"))
        n_seq = sum(len(seqs) for _, seqs in batch)
        total = mp.fsum(
            sequence_term(kind, *seq, adv[b][g], eps_low, eps_high, beta)
            for b, (_, seqs) in enumerate(batch) for g, seq in enumerate(seqs)
        )
        return total / n_seq


def finite_difference_grad(kind, batch, h=1e-6, eps_low=0.2, eps_high=0.28, beta=1e-4):
    """Central differences of the objective w.r.t. every new-policy log-prob.

    Advantages depend on rewards only, so moving one log-prob changes only its
    own sequence's term; each difference is computed on that term alone.
    """
    with mp.workdps(DPS):
        adv = advantages(batch, batch_norm=(kind == "bn-gspo"))
        n_seq = sum(len(seqs) for _, seqs in batch)
        hh = mp.mpf(h)
        grads = []
        for b, (_, seqs) in enumerate(batch):
            row = []
            for g, (new, old, ref, mask) in enumerate(seqs):
                coords = []
                for t in range(len(new)):
                    plus = list(map(mp.mpf, new))
                    minus = list(map(mp.mpf, new))
                    plus[t] += hh
                    minus[t] -= hh
                    fp = sequence_term(kind, plus, old, ref, mask, adv[b][g], eps_low, eps_high, beta)
                    fm = sequence_term(kind, minus, old, ref, mask, adv[b][g], eps_low, eps_high, beta)
                    coords.append((fp - fm) / (2 * hh) / n_seq)
                row.append(coords)
            grads.append(row)
        return grads


def relative_error(a, n) -> float:
    a, n = mp.mpf(a), mp.mpf(n)
    scale = max(abs(a), abs(n))
    return 0.0 if scale == 0 else float(abs(a - n) / scale)
