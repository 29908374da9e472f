"""From one anchor's slot grid to a flattened, tree-masked verification batch."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ctc import collapse
from .tensor_core import MASKED, default_dtype


@dataclass
class CandidatePath:
    raw: tuple[int, ...]
    score: float
    collapsed: tuple[int, ...]
    keep_indices: tuple[int, ...]


def topk_per_slot(grid, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` token ids per slot (blank included), best first, ties to the lower id.

    Returns ``(ids, log_probs)``, both ``[L, k]``.
    """
    grid = np.asarray(grid)
    L, V = grid.shape
    if not 1 <= k <= V:
        raise ValueError(f"k={k} outside [1, {V}]")
    order = np.argsort(-grid, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(grid, order, axis=1)


def enumerate_paths(ids: np.ndarray, scores: np.ndarray, beam: int, blank: int) -> list[CandidatePath]:
    """Exact top-``beam`` raw paths over the per-slot product space, best first.

    Path scores are sums of independent per-slot terms and each slot list is
    sorted, so popping a max-heap of index tuples (pushing each popped tuple's
    one-step successors) yields paths in exact score order.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    L, k = ids.shape
    sc = scores.astype(np.float64)
    start = (0,) * L
    heap = [(-float(sc[np.arange(L), start].sum()), start)]
    seen = {start}
    out: list[CandidatePath] = []
    while heap and len(out) < beam:
        neg, idx = heapq.heappop(heap)
        raw = tuple(int(ids[j, i]) for j, i in enumerate(idx))
        col, keep = collapse(raw, blank)
        out.append(CandidatePath(raw, -neg, tuple(col), tuple(keep)))
        for j in range(L):
            if idx[j] + 1 < k:
                nxt = idx[:j] + (idx[j] + 1,) + idx[j + 1 :]
                if nxt not in seen:
                    seen.add(nxt)
                    heapq.heappush(heap, (neg + sc[j, idx[j]] - sc[j, idx[j] + 1], nxt))
    return out


def ctc_transform(paths: Sequence[CandidatePath]) -> list[CandidatePath]:
    """Dedupe by collapsed string (keep the best raw path), drop empty strings, sort by score."""
    best: dict[tuple[int, ...], CandidatePath] = {}
    for p in paths:
        if not p.collapsed:
            continue
        cur = best.get(p.collapsed)
        if cur is None or p.score > cur.score:
            best[p.collapsed] = p
    return sorted(best.values(), key=lambda p: -p.score)


def raw_candidates(paths: Sequence[CandidatePath]) -> list[CandidatePath]:
    """Collapse disabled: raw paths verified as-is (blanks and repeats included), deduped."""
    seen: dict[tuple[int, ...], CandidatePath] = {}
    for p in paths:
        if p.raw not in seen:
            seen[p.raw] = CandidatePath(p.raw, p.score, p.raw, tuple(range(len(p.raw))))
    return sorted(seen.values(), key=lambda p: -p.score)


@dataclass
class DraftTrie:
    """Prefix-merged candidates, flattened breadth-first.

    Row 0 is the root: the newest committed token, whose key/value is not yet
    cached. Row ``i`` sits at position ``committed_length + depth[i]``; its
    mask row admits every cached position (implicitly), itself and its
    ancestors.
    """

    tokens: np.ndarray
    parents: np.ndarray
    depth: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    children: list[dict[int, int]]
    ancestry: list[frozenset[int]]
    committed_length: int
    leaves: dict[int, CandidatePath] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    def path_to(self, node: int) -> list[int]:
        out = []
        while node > 0:
            out.append(node)
            node = int(self.parents[node])
        return out[::-1]

    def prune(self, max_nodes: int) -> "DraftTrie":
        """Keep the first ``max_nodes`` BFS rows (parents always precede children)."""
        if max_nodes >= len(self):
            return self
        n = max(1, max_nodes)
        children = [{t: c for t, c in ch.items() if c < n} for ch in self.children[:n]]
        return DraftTrie(
            self.tokens[:n], self.parents[:n], self.depth[:n], self.positions[:n], self.mask[:n, :n],
            children, self.ancestry[:n], self.committed_length,
            {i: p for i, p in self.leaves.items() if i < n},
        )


def build_trie(candidates: Sequence, root_token: int, committed_length: int) -> DraftTrie:
    """Merge candidate strings by shared prefix under ``root_token``.

    ``candidates`` are :class:`CandidatePath` objects (their ``collapsed``
    strings are used) or plain token sequences.
    """
    strings = [c.collapsed if isinstance(c, CandidatePath) else tuple(c) for c in candidates]
    # insert into a dict trie first, then number nodes breadth-first
    tree: dict = {}
    ends: dict[tuple, object] = {}
    for s, c in zip(strings, candidates):
        node = tree
        for tok in s:
            node = node.setdefault(int(tok), {})
        ends.setdefault(tuple(int(t) for t in s), c)

    tokens = [int(root_token)]
    parents = [-1]
    depth = [0]
    prefixes: list[tuple] = [()]
    queue = [(tree, 0)]
    qi = 0
    while qi < len(queue):
        sub, idx = queue[qi]
        qi += 1
        for tok in sorted(sub):
            tokens.append(tok)
            parents.append(idx)
            depth.append(depth[idx] + 1)
            prefixes.append(prefixes[idx] + (tok,))
            queue.append((sub[tok], len(tokens) - 1))

    n = len(tokens)
    children: list[dict[int, int]] = [dict() for _ in range(n)]
    ancestry: list[frozenset[int]] = [frozenset()]
    for i in range(1, n):
        children[parents[i]][tokens[i]] = i
        ancestry.append(ancestry[parents[i]] | {parents[i]})
    visible = np.zeros((n, n), dtype=bool)
    for i in range(n):
        visible[i, i] = True
        for a in ancestry[i]:
            visible[i, a] = True
    mask = np.where(visible, 0.0, MASKED).astype(default_dtype())
    leaves = {}
    for i in range(1, n):
        c = ends.get(prefixes[i])
        if c is not None and not children[i]:
            leaves[i] = c
    depth_arr = np.asarray(depth, dtype=np.int64)
    return DraftTrie(
        tokens=np.asarray(tokens, dtype=np.int64),
        parents=np.asarray(parents, dtype=np.int64),
        depth=depth_arr,
        positions=committed_length + depth_arr,
        mask=mask,
        children=children,
        ancestry=ancestry,
        committed_length=committed_length,
        leaves=leaves,
    )
