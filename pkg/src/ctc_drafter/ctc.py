"""CTC collapse, feasibility, the alignment-sum dynamic program and its brute-force oracles."""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .tensor_core import NEG_SENTINEL, Tensor


class InfeasibleTarget(ValueError):
    """Target needs more slots than the alignment provides."""


class ZeroProbabilityPrefix(ValueError):
    """No alignment of nonzero probability collapses to a string with this prefix."""


class EnumerationTooLarge(ValueError):
    pass


def collapse(alignment: Sequence[int], blank: int) -> tuple[list[int], list[int]]:
    """Merge runs of equal tokens, then drop blanks.

    Returns the collapsed tokens and, for each of them, the slot index where
    its source run starts.
    """
    out: list[int] = []
    keep: list[int] = []
    prev = None
    for i, a in enumerate(alignment):
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
            keep.append(i)
        prev = a
    return out, keep


def min_alignment_length(target: Sequence[int]) -> int:
    t = list(target)
    return len(t) + sum(1 for x, y in zip(t, t[1:]) if x == y)


def _extended(targets: Sequence[Sequence[int]], blank: int):
    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.full((len(targets), S), blank, dtype=np.int64)
    skip = np.full((len(targets), S), NEG_SENTINEL)
    ends = np.zeros((len(targets), 2), dtype=np.int64)
    for b, t in enumerate(targets):
        for i, y in enumerate(t):
            ext[b, 2 * i + 1] = y
            if i > 0 and t[i - 1] != y:
                skip[b, 2 * i + 1] = 0.0
        n = 2 * len(t) + 1
        ends[b] = (n - 1, n - 2 if n >= 2 else S)  # index S is an appended sentinel column
    return ext, skip, ends


def ctc_log_prob_batch(slot_log_probs: Tensor, targets: Sequence[Sequence[int]], blank: int) -> Tensor:
    """log P(target | slots) for a batch: ``slot_log_probs`` is ``[B, L, V]``, result ``[B]``.

    Forward variables over the blank-interleaved target live in log space and
    are built from tensor primitives, so ``backward`` differentiates the
    recursion exactly.
    """
    B, L, V = slot_log_probs.shape
    if len(targets) != B:
        raise ValueError(f"{len(targets)} targets for a batch of {B}")
    for t in targets:
        need = min_alignment_length(t)
        if need > L:
            raise InfeasibleTarget(f"target of length {len(t)} needs {need} slots, only {L} available")
    ext, skip, ends = _extended(targets, blank)
    S = ext.shape[1]
    dt = slot_log_probs.dtype
    emit = tc.take_along_axis(slot_log_probs, np.broadcast_to(ext[:, None, :], (B, L, S)), axis=-1)
    init = np.full(S, NEG_SENTINEL, dtype=dt)
    init[: min(2, S)] = 0.0
    alpha = tc.add(emit[:, 0], init)
    skip = skip.astype(dt)
    sent1 = Tensor(np.full((B, 1), NEG_SENTINEL, dtype=dt))
    sent2 = Tensor(np.full((B, 2), NEG_SENTINEL, dtype=dt))
    for t in range(1, L):
        stay = alpha
        step = tc.concat([sent1, alpha[:, : S - 1]], axis=1)
        if S >= 3:
            jump = tc.add(tc.concat([sent2, alpha[:, : S - 2]], axis=1), skip)
        else:
            jump = Tensor(np.full((B, S), NEG_SENTINEL, dtype=dt))
        alpha = tc.add(tc.logsumexp(tc.stack([stay, step, jump], axis=-1)), emit[:, t])
    padded = tc.concat([alpha, sent1], axis=1)
    return tc.logsumexp(tc.take_along_axis(padded, ends, axis=1))


def ctc_log_prob(slot_log_probs: Tensor, target: Sequence[int], blank: int) -> Tensor:
    """Scalar log-probability that the ``[L, V]`` slot rows collapse to ``target``."""
    x = slot_log_probs if isinstance(slot_log_probs, Tensor) else Tensor(slot_log_probs)
    return ctc_log_prob_batch(x.reshape(1, *x.shape), [list(target)], blank)[0]


def _enumeration_guard(L: int, V: int, limit: int = 10**6) -> None:
    if V**L > limit:
        raise EnumerationTooLarge(f"{V}^{L} = {V**L} alignments exceeds the enumeration limit of {limit}")


def brute_force_log_prob(slot_log_probs, target: Sequence[int], blank: int) -> float:
    """Sum the probability of every length-L alignment that collapses to ``target``."""
    lp = np.asarray(slot_log_probs, dtype=np.float64)
    L, V = lp.shape
    _enumeration_guard(L, V)
    target = [int(x) for x in target]
    total = 0.0
    for a in itertools.product(range(V), repeat=L):
        if collapse(a, blank)[0] == target:
            total += np.exp(lp[np.arange(L), a].sum())
    return float(np.log(total)) if total > 0 else -np.inf


def brute_force_distribution(slot_log_probs, blank: int) -> dict[tuple[int, ...], float]:
    """Probability of every collapsed string (enumeration)."""
    lp = np.asarray(slot_log_probs, dtype=np.float64)
    L, V = lp.shape
    _enumeration_guard(L, V)
    dist: dict[tuple[int, ...], float] = {}
    for a in itertools.product(range(V), repeat=L):
        y = tuple(collapse(a, blank)[0])
        dist[y] = dist.get(y, 0.0) + float(np.exp(lp[np.arange(L), a].sum()))
    return dist


def collapsed_prefix_marginals(slot_log_probs, prefix: Sequence[int], blank: int) -> tuple[np.ndarray, float]:
    """Distribution of the next collapsed token given a collapsed ``prefix``.

    Returns ``(next_probs, end_prob)``: ``next_probs[v]`` is the conditional
    probability that the collapsed draft continues with ``v`` (zero at the
    blank id), ``end_prob`` the probability that it stops right after the
    prefix. The DP state is (prefix tokens matched, last raw slot symbol).
    """
    p = np.exp(np.asarray(slot_log_probs, dtype=np.float64))
    L, V = p.shape
    prefix = [int(x) for x in prefix]
    n = len(prefix)
    # mass[k, s]: prob. of having matched k prefix tokens with last raw symbol s
    mass = np.zeros((n + 1, V))
    mass[0, blank] = 1.0  # "nothing emitted yet" behaves like a preceding blank
    nxt = np.zeros(V)
    for j in range(L):
        pj = p[j]
        new = np.zeros_like(mass)
        tot = mass.sum(axis=1)
        new[:, blank] += tot * pj[blank]
        keep = mass * pj[None, :]  # repeat of the last symbol merges into it
        keep[:, blank] = 0.0
        new += keep
        for k in range(n):
            c = prefix[k]
            new[k + 1, c] += (tot[k] - mass[k, c]) * pj[c]
        fresh = (tot[n] - mass[n]) * pj
        fresh[blank] = 0.0
        nxt += fresh
        mass = new
    end = mass[n].sum()
    z = nxt.sum() + end
    if z <= 0.0:
        raise ZeroProbabilityPrefix(f"prefix {prefix} has zero probability under the draft")
    return nxt / z, float(end / z)


def brute_force_prefix_marginals(slot_log_probs, prefix: Sequence[int], blank: int) -> tuple[np.ndarray, float]:
    """Enumeration oracle for :func:`collapsed_prefix_marginals`."""
    V = np.asarray(slot_log_probs).shape[1]
    prefix = tuple(int(x) for x in prefix)
    n = len(prefix)
    nxt = np.zeros(V)
    end = 0.0
    for y, pr in brute_force_distribution(slot_log_probs, blank).items():
        if y[:n] != prefix:
            continue
        if len(y) == n:
            end += pr
        else:
            nxt[y[n]] += pr
    z = nxt.sum() + end
    if z <= 0.0:
        raise ZeroProbabilityPrefix(f"prefix {list(prefix)} has zero probability under the draft")
    return nxt / z, end / z
