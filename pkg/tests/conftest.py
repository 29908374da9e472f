"""Shared fixtures: a tiny memorization pipeline trained once per session."""

from dataclasses import dataclass

import numpy as np
import pytest

from ctc_drafter.corpus import repetitive_corpus
from ctc_drafter.distill import make_distilled_dataset
from ctc_drafter.models import BaseModel, DraftModule, ModelConfig, Vocab
from ctc_drafter.training import TrainConfig, prepare_draft_examples, train_base, train_draft

TINY_UNIT = "the little green frog sees all the tall trees. "
TINY_CFG = ModelConfig(d_model=32, n_layers=2, n_heads=2, max_seq_len=64)


@dataclass
class TinyPipeline:
    text: str
    tokens: list
    base: BaseModel
    base_history: list
    dataset: list
    draft: DraftModule
    draft_history: list
    prepared: list
    base_before: dict
    base_after: dict


@pytest.fixture(scope="session")
def tiny():
    text = repetitive_corpus(1000, unit=TINY_UNIT)
    tokens = Vocab().encode(text)
    base, bh = train_base(tokens, TINY_CFG, TrainConfig(epochs=200, batch_size=4, base_lr=3e-3, clip_threshold=1.0))
    ds = make_distilled_dataset([tokens], base)
    dcfg = TrainConfig(epochs=60, batch_size=1, lr=1e-2, clip_threshold=1.0)
    prepared = prepare_draft_examples(ds, base, dcfg)
    before = {k: v.data.copy() for k, v in base.params.items()}
    draft, dh = train_draft(ds, base, dcfg, prepared=prepared)
    after = {k: v.data.copy() for k, v in base.params.items()}
    return TinyPipeline(text, tokens, base, bh, ds, draft, dh, prepared, before, after)


@pytest.fixture(scope="session")
def random_pair():
    """Untrained float32 base/draft with large init so logits are far from uniform."""
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, max_seq_len=96, init_std=0.5)
    base = BaseModel(cfg, seed=4)
    return base, DraftModule(cfg, base.lm_head, seed=5)


def random_prompts(n, seed, vmax=256, max_len=8):
    rng = np.random.default_rng(seed)
    return [[int(x) for x in rng.integers(0, vmax, size=int(rng.integers(1, max_len + 1)))] for _ in range(n)]
