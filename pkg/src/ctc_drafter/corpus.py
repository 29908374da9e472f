"""Deterministic toy corpora that a desk-scale model can memorize."""

from __future__ import annotations

import numpy as np

_SUBJECTS = [
    "the small green frog", "a tall old man", "my little sister", "the happy cook", "our good teacher",
    "the sleepy kitten", "that silly goose", "the busy bee", "a yellow balloon seller", "the cool mailman",
    "my tall neighbor", "the little puppy", "a sweet old lady", "the speedy rabbit", "our funny uncle",
]
_VERBS = [
    "will see", "sells", "follows", "needs", "keeps", "carries", "feeds", "really misses", "calls",
    "will buy", "borrows", "fills", "spills", "pulls",
]
_OBJECTS = [
    "the yellow ball", "three cookies", "a green apple", "the wooden door", "all the books",
    "a glass of root beer", "the big balloon", "sweet coffee", "a pretty doll", "the little kettle",
    "a small bottle", "the shiny wheel", "eggs and rolls", "a cup of tea",
]
_ENDINGS = [
    "in the morning", "after the storm", "before dinner", "every summer", "on the hill",
    "near the pool", "by the tall tree", "at noon", "all week", "in the kitchen", "off the street",
    "across the valley", "with a smile", "too soon",
]


def sentences(n: int, seed: int = 0) -> list[str]:
    """``n`` distinct template sentences (lots of doubled letters on purpose)."""
    rng = np.random.default_rng(seed)
    out: list[str] = []
    seen = set()
    while len(out) < n:
        s = " ".join(
            [_SUBJECTS[rng.integers(len(_SUBJECTS))], _VERBS[rng.integers(len(_VERBS))],
             _OBJECTS[rng.integers(len(_OBJECTS))], _ENDINGS[rng.integers(len(_ENDINGS))]]
        )
        s = s[0].upper() + s[1:] + "."
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def memorizable_corpus(n_bytes: int = 50_000, n_sentences: int = 120, seed: int = 0) -> str:
    """A fixed cycle of sentences, one per line, repeated until ``n_bytes`` long.

    The cycle order makes every next line a function of the previous one, so
    the whole text is learnable from a line of context.
    """
    lines = sentences(n_sentences, seed)
    out: list[str] = []
    size = 0
    i = 0
    while size < n_bytes:
        line = lines[i % len(lines)] + "\n"
        out.append(line)
        size += len(line)
        i += 1
    return "".join(out)[:n_bytes]


def repetitive_corpus(n_bytes: int = 1000, unit: str = "the cat sat on the mat. ") -> str:
    return (unit * (n_bytes // len(unit) + 1))[:n_bytes]


def bench_prompts(n: int = 20, n_sentences: int = 120, seed: int = 0) -> list[str]:
    """Prompts = one full corpus line; the memorized continuation is the next line."""
    lines = sentences(n_sentences, seed)
    step = max(1, len(lines) // n)
    return [lines[(i * step) % len(lines)] for i in range(n)]
