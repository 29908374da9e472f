"""Quick oracle suites runnable from the CLI (``ctc-drafter selfcheck``)."""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .ctc import brute_force_log_prob, ctc_log_prob, min_alignment_length
from .decoding import generate, generate_autoregressive
from .drafting import build_trie
from .models import BaseModel, DraftModule, KVCache, ModelConfig


def random_log_probs(rng, L: int, V: int, scale: float = 2.0) -> np.ndarray:
    x = rng.standard_normal((L, V)) * scale
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def check_ctc_oracle(n: int = 60, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    with tc.precision(np.float64):
        while done < n:
            L, V = int(rng.integers(1, 6)), int(rng.integers(2, 6))
            lp = random_log_probs(rng, L, V)
            t = [int(x) for x in rng.integers(0, V - 1, size=int(rng.integers(0, L + 1)))]
            if min_alignment_length(t) > L:
                continue
            a = ctc_log_prob(tc.Tensor(lp), t, V - 1).item()
            worst = max(worst, abs(a - brute_force_log_prob(lp, t, V - 1)))
            done += 1
    return worst


def check_ctc_gradient(n: int = 10, seed: int = 1) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        L, V = int(rng.integers(2, 6)), int(rng.integers(3, 6))
        lp = random_log_probs(rng, L, V)
        t = [int(x) for x in rng.integers(0, V - 1, size=int(rng.integers(1, (L + 1) // 2 + 1)))]
        if min_alignment_length(t) > L:
            continue
        worst = max(worst, tc.gradcheck(lambda x: ctc_log_prob(x, t, V - 1), [lp]))
    return worst


def check_primitive_gradients(seed: int = 2) -> float:
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    w, bias = rng.standard_normal(4), rng.standard_normal(4)
    q, k, v = (rng.standard_normal((2, 3, 4)) for _ in range(3))
    cases = [
        (tc.matmul, [a, b]),
        (tc.log_softmax, [a]),
        (tc.softmax, [a]),
        (tc.logsumexp, [a]),
        (tc.gelu, [a]),
        (lambda x, g, c: tc.layer_norm(x, g, c), [a, w, bias]),
        (lambda x, y, z: tc.attention(x, y, z), [q, k, v]),
    ]
    return max(tc.gradcheck(f, xs) for f, xs in cases)


def check_tree_mask(seed: int = 3) -> float:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, max_seq_len=64, init_std=0.3)
    base = BaseModel(cfg, seed=seed)
    ctx = [int(x) for x in rng.integers(0, 256, size=8)]
    cands = [[int(x) for x in rng.integers(0, 4, size=int(rng.integers(1, 4)))] for _ in range(6)]
    worst = 0.0
    with tc.no_grad():
        cache = KVCache(cfg)
        base.forward(ctx[:-1], cache)
        trie = build_trie(cands, ctx[-1], cache.length)
        _, tree_logits, _ = base.forward(trie.tokens, cache, positions=trie.positions, attn_mask=trie.mask, commit=False)
        for i in range(len(trie)):
            seq = ctx + [int(trie.tokens[j]) for j in trie.path_to(i)]
            _, ref, _ = base.forward(seq)
            worst = max(worst, float(np.abs(ref.data[-1] - tree_logits.data[i]).max()))
    return worst


def check_greedy_lossless(n_prompts: int = 8, seed: int = 4) -> int:
    rng = np.random.default_rng(seed)
    mismatches = 0
    with tc.precision(np.float64):
        cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, max_seq_len=96, init_std=0.5)
        base = BaseModel(cfg, seed=seed)
        draft = DraftModule(cfg, base.lm_head, seed=seed + 1)
        for _ in range(n_prompts):
            prompt = [int(x) for x in rng.integers(0, 256, size=int(rng.integers(1, 8)))]
            a, _ = generate(base, draft, prompt, 24)
            b, _ = generate_autoregressive(base, prompt, 24)
            mismatches += a != b
    return mismatches


def run_selfcheck(echo=print) -> bool:
    checks = [
        ("ctc vs brute force", check_ctc_oracle, lambda v: v < 1e-6),
        ("ctc gradient", check_ctc_gradient, lambda v: v < 1e-4),
        ("primitive gradients", check_primitive_gradients, lambda v: v < 1e-5),
        ("tree-mask equivalence", check_tree_mask, lambda v: v < 1e-4),
        ("greedy losslessness (mismatches)", check_greedy_lossless, lambda v: v == 0),
    ]
    ok = True
    for name, fn, passes in checks:
        val = fn()
        good = bool(passes(val))
        ok &= good
        echo(f"{'PASS' if good else 'FAIL'}  {name}: {val:.3g}")
    return ok
