"""Draft, transform, verify in one tree-masked pass, accept, and advance the cache."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .ctc import ZeroProbabilityPrefix, collapsed_prefix_marginals
from .drafting import DraftTrie, build_trie, ctc_transform, enumerate_paths, raw_candidates, topk_per_slot
from .models import BaseModel, ContextOverflow, DraftModule, KVCache

STAGES = ("base_forward", "draft_forward", "ctc_transform", "tree_verify", "other")


@dataclass
class DecodeConfig:
    mode: str = "greedy"  # or "sample"
    k: int = 3
    beam: int = 16
    collapse: bool = True
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"mode must be greedy or sample, got {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class AcceptanceResult:
    accepted_tokens: list[int]
    accepted_nodes: list[int]  # trie rows descended through, root excluded
    rejected: bool = False

    @property
    def n_draft(self) -> int:
        return len(self.accepted_nodes)


@dataclass
class RunMetrics:
    N: int = 0
    M: int = 0
    T: float = 0.0
    stage_times: dict = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    truncated: bool = False

    @property
    def beta(self) -> float:
        from .bench import compute_beta

        return compute_beta(self.N, self.M)


def _argmax(row) -> int:
    return int(np.argmax(row))  # first maximum, i.e. the lowest id on ties


def softmax_np(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mask_blank(logits, blank: int) -> np.ndarray:
    """The base model never emits the CTC blank; hide it before argmax/sampling."""
    out = np.array(logits, dtype=np.float64, copy=True)
    out[..., blank] = -np.inf
    return out


def _sample(p, rng) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


# ---------------------------------------------------------------------------
# acceptance rules


def greedy_accept(trie: DraftTrie, tree_logits) -> AcceptanceResult:
    """Descend while the base argmax at the current node is one of its children; add the bonus argmax."""
    node = 0
    tokens: list[int] = []
    nodes: list[int] = []
    while True:
        want = _argmax(tree_logits[node])
        child = trie.children[node].get(want)
        if child is None:
            tokens.append(want)
            return AcceptanceResult(tokens, nodes, rejected=bool(trie.children[node]))
        tokens.append(want)
        nodes.append(child)
        node = child


def accept_token(p_base: float, q_draft: float, u: float) -> bool:
    if not q_draft > 0:
        raise ValueError("drafted token must have positive draft probability")
    return u < min(1.0, p_base / q_draft)


def residual_distribution(p_base, q_draft) -> np.ndarray:
    p = np.asarray(p_base, dtype=np.float64)
    r = np.maximum(0.0, p - np.asarray(q_draft, dtype=np.float64))
    z = r.sum()
    if z < 1e-12:
        return p
    return r / z


def sample_candidate(grid, blank: int, rng, max_len: int | None = None):
    """Draw one collapsed draft from the slot grid, token by token.

    Returns ``(tokens, q_rows)`` where ``q_rows[i]`` is the draft's next-token
    distribution at step ``i`` conditioned on continuing (the stop mass is
    split off first, so acceptance uses a proper distribution).
    """
    tokens: list[int] = []
    rows: list[np.ndarray] = []
    max_len = grid.shape[0] if max_len is None else max_len
    while len(tokens) < max_len:
        try:
            nxt, end = collapsed_prefix_marginals(grid, tokens, blank)
        except ZeroProbabilityPrefix:
            break
        if rng.random() < end or end >= 1.0:
            break
        q = nxt / nxt.sum()
        tokens.append(_sample(q, rng))
        rows.append(q)
    return tokens, rows


def sample_accept_path(candidate, q_rows, p_rows, rng) -> AcceptanceResult:
    """Token-by-token speculative sampling along one drafted chain.

    ``p_rows[i]`` is the base distribution predicting ``candidate[i]``;
    ``p_rows[len(candidate)]`` is used for the bonus after full acceptance.
    """
    tokens: list[int] = []
    nodes: list[int] = []
    for i, (tok, q) in enumerate(zip(candidate, q_rows)):
        p = p_rows[i]
        if accept_token(p[tok], q[tok], rng.random()):
            tokens.append(int(tok))
            nodes.append(i + 1)
            continue
        tokens.append(_sample(residual_distribution(p, q), rng))
        return AcceptanceResult(tokens, nodes, rejected=True)
    tokens.append(_sample(p_rows[len(candidate)], rng))
    return AcceptanceResult(tokens, nodes, rejected=False)


# ---------------------------------------------------------------------------
# sessions


class DecodeSession:
    """Committed tokens plus cache for one generation.

    The newest committed token is always pending: its key/value is computed
    as the root row of the next verification pass, so ``cache.length ==
    len(tokens) - 1`` between steps.
    """

    def __init__(self, base: BaseModel, draft: DraftModule | None, prompt, config: DecodeConfig | None = None):
        self.base = base
        self.draft = draft
        self.cfg = config or DecodeConfig()
        self.blank = base.cfg.vocab_size - 1
        self.rng = np.random.default_rng(self.cfg.seed)
        self.cache = KVCache(base.cfg, dtype=base.lm_head.dtype)
        self.prompt = [int(t) for t in prompt] or [base.cfg.vocab_size - 3]
        self.tokens: list[int] = list(self.prompt)
        self.metrics = RunMetrics()

    @contextmanager
    def _stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.metrics.stage_times[name] += time.perf_counter() - t0

    @property
    def generated(self) -> list[int]:
        return self.tokens[len(self.prompt) :]

    def _pick(self, logits) -> int:
        logits = mask_blank(logits, self.blank)
        if self.cfg.mode == "greedy":
            return _argmax(logits)
        return _sample(softmax_np(logits, self.cfg.temperature), self.rng)

    def prefill(self) -> AcceptanceResult:
        with self._stage("base_forward"), tc.no_grad():
            _, logits, _ = self.base.forward(self.prompt, self.cache)
        tok = self._pick(logits.data[-1])
        self.tokens.append(tok)
        self.metrics.N += 1
        self.metrics.M += 1
        return AcceptanceResult([tok], [])

    def _fits(self, extra: int) -> bool:
        return self.cache.length + extra <= self.base.cfg.max_seq_len

    def step(self) -> AcceptanceResult:
        """One speculative decode step; the first call runs the prompt prefill."""
        if self.metrics.M == 0:
            return self.prefill()
        if not self._fits(1):
            raise ContextOverflow("no room left for the pending token")
        n = self.cache.length
        blank = self.blank
        grid = None
        if self.draft is not None:
            with self._stage("draft_forward"), tc.no_grad():
                grid = self.draft.forward(self.cache.hidden[:n], [n - 1]).data[0]
        if self.cfg.mode == "greedy":
            res = self._greedy_step(grid, n, blank)
        else:
            res = self._sample_step(grid, n, blank)
        with self._stage("other"):
            self.cache.keep([0] + res.accepted_nodes)
            self.tokens.extend(res.accepted_tokens)
            self.metrics.N += len(res.accepted_tokens)
            self.metrics.M += 1
        return res

    def _greedy_step(self, grid, n, blank) -> AcceptanceResult:
        with self._stage("ctc_transform"):
            cands = []
            if grid is not None:
                ids, scores = topk_per_slot(grid, self.cfg.k)
                paths = enumerate_paths(ids, scores, self.cfg.beam, blank)
                cands = ctc_transform(paths) if self.cfg.collapse else raw_candidates(paths)
            trie = build_trie(cands, self.tokens[-1], n)
            trie = trie.prune(self.base.cfg.max_seq_len - n)
        with self._stage("tree_verify"), tc.no_grad():
            _, logits, _ = self.base.forward(trie.tokens, self.cache, positions=trie.positions, attn_mask=trie.mask, commit=False)
            return greedy_accept(trie, mask_blank(logits.data, blank))

    def _sample_step(self, grid, n, blank) -> AcceptanceResult:
        with self._stage("ctc_transform"):
            cand, q_rows = [], []
            if grid is not None:
                cand, q_rows = sample_candidate(grid, blank, self.rng, max_len=self.base.cfg.max_seq_len - n - 1)
            trie = build_trie([cand] if cand else [], self.tokens[-1], n)
        with self._stage("tree_verify"), tc.no_grad():
            _, logits, _ = self.base.forward(trie.tokens, self.cache, positions=trie.positions, attn_mask=trie.mask, commit=False)
            p_rows = softmax_np(mask_blank(logits.data, blank), self.cfg.temperature)
            return sample_accept_path(cand, q_rows, p_rows, self.rng)


def decode_step(session: DecodeSession) -> AcceptanceResult:
    return session.step()


def _finish(session: DecodeSession, max_new_tokens: int, eos: int | None, t0: float):
    out = session.generated[:max_new_tokens]
    if eos is not None and eos in out:
        out = out[: out.index(eos) + 1]
    m = session.metrics
    m.N = len(out)
    m.T = time.perf_counter() - t0
    known = sum(v for k, v in m.stage_times.items() if k != "other")
    m.stage_times["other"] = max(0.0, m.T - known)
    return out, m


def generate(base: BaseModel, draft: DraftModule | None, prompt, max_new_tokens: int,
             config: DecodeConfig | None = None, eos: int | None = None):
    """Speculative generation. Returns ``(new_tokens, RunMetrics)``; ``new_tokens`` ends at EOS if one is produced."""
    session = DecodeSession(base, draft, prompt, config)
    eos = base.cfg.vocab_size - 2 if eos is None else eos
    t0 = time.perf_counter()
    while len(session.generated) < max_new_tokens:
        try:
            res = session.step()
        except ContextOverflow:
            session.metrics.truncated = True
            break
        if eos in res.accepted_tokens:
            break
    return _finish(session, max_new_tokens, eos, t0)


def generate_autoregressive(base: BaseModel, prompt, max_new_tokens: int,
                            config: DecodeConfig | None = None, eos: int | None = None):
    """Vanilla decoding: one cached base forward per token."""
    cfg = config or DecodeConfig()
    eos = base.cfg.vocab_size - 2 if eos is None else eos
    session = DecodeSession(base, None, prompt, cfg)
    t0 = time.perf_counter()
    m = session.metrics
    while len(session.generated) < max_new_tokens:
        if m.M == 0:
            tok = session.prefill().accepted_tokens[0]
        else:
            if not session._fits(1):
                m.truncated = True
                break
            with session._stage("base_forward"), tc.no_grad():
                _, logits, _ = base.forward([session.tokens[-1]], session.cache)
            tok = session._pick(logits.data[-1])
            session.tokens.append(tok)
            m.N += 1
            m.M += 1
        if tok == eos:
            break
    return _finish(session, max_new_tokens, eos, t0)
