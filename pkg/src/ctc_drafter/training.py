"""Base-model pretraining (next-token CE) and draft-module training (per-anchor CTC or slot CE)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from . import tensor_core as tc
from .ctc import ctc_log_prob_batch, min_alignment_length
from .distill import DistilledExample, extract_anchor_targets
from .models import BaseModel, DraftModule, ModelConfig
from .tensor_core import Adam, Tensor, clip_gradients

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    lr: float = 3e-5
    base_lr: float = 3e-4
    clip_threshold: float = 0.5
    epochs: int = 1
    batch_size: int = 4
    seed: int = 0
    loss_mode: str = "ctc"  # or "ce"
    max_len: int = 0  # base training window; 0 means the model's full context
    anchor_stride: int = 1
    schedule: str = "constant"  # or "cosine": decay to 10% of the peak rate

    def __post_init__(self):
        if self.lr <= 0 or self.base_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")
        if self.loss_mode not in ("ctc", "ce"):
            raise ValueError(f"loss_mode must be ctc or ce, got {self.loss_mode!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be constant or cosine, got {self.schedule!r}")


def scheduled_lr(peak: float, step: int, total: int, schedule: str) -> float:
    if schedule == "constant" or total <= 1:
        return peak
    frac = min(step / (total - 1), 1.0)
    return peak * (0.1 + 0.45 * (1.0 + math.cos(math.pi * frac)))


def _emit(stream: IO | None, record: dict) -> None:
    if stream is not None:
        stream.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# base model


def base_windows(tokens: Sequence[int], window: int, rng) -> np.ndarray:
    """Non-overlapping ``window+1``-token slices starting at a random offset, shuffled."""
    tokens = np.asarray(tokens, dtype=np.int64)
    span = window + 1
    if len(tokens) < 2:
        raise ValueError("corpus needs at least two tokens")
    if len(tokens) <= span:
        return tokens[None]
    off = int(rng.integers(0, min(window, len(tokens) - span) + 1))
    n = (len(tokens) - off) // span
    wins = tokens[off : off + n * span].reshape(n, span)
    return wins[rng.permutation(n)]


def lm_loss(model: BaseModel, batch: np.ndarray) -> Tensor:
    _, logits, _ = model.forward(batch[:, :-1])
    logp = tc.log_softmax(logits)
    picked = tc.take_along_axis(logp, batch[:, 1:, None], axis=-1)
    return tc.mul(tc.sum_(picked), -1.0 / picked.data.size)


def train_base(corpus: Sequence[int], model_cfg: ModelConfig, cfg: TrainConfig,
               metrics: IO | None = None, model: BaseModel | None = None) -> tuple[BaseModel, list[float]]:
    """Next-token cross-entropy on one token stream. Returns the model and per-epoch mean loss."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    model = model or BaseModel(model_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, lr=cfg.base_lr)
    window = min(cfg.max_len or model_cfg.max_seq_len, model_cfg.max_seq_len)
    per_epoch = -(-max(1, (len(corpus) - 1) // (window + 1)) // cfg.batch_size)
    history: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        wins = base_windows(corpus, window, rng)
        losses = []
        for i in range(0, len(wins), cfg.batch_size):
            loss = lm_loss(model, wins[i : i + cfg.batch_size])
            if not math.isfinite(loss.item()):
                # parameters still hold the last finite-loss state
                raise TrainingDiverged(f"non-finite loss at step {step}", model)
            loss.backward()
            gn = clip_gradients(model.params, cfg.clip_threshold)
            opt.lr = scheduled_lr(cfg.base_lr, step, cfg.epochs * per_epoch, cfg.schedule)
            opt.step()
            losses.append(loss.item())
            _emit(metrics, {"step": step, "loss": loss.item(), "grad_norm": gn, "lr": opt.lr})
            step += 1
        history.append(float(np.mean(losses)))
        log.info("base epoch %d loss %.4f", epoch, history[-1])
        _emit(metrics, {"epoch": epoch, "loss": history[-1]})
    return model, history


def per_token_ce(model: BaseModel, corpus: Sequence[int]) -> float:
    """Mean next-token CE over the whole stream (evaluation, no grad)."""
    window = model.cfg.max_seq_len - 1
    toks = np.asarray(corpus, dtype=np.int64)
    total, count = 0.0, 0
    with tc.no_grad():
        for start in range(0, len(toks) - 1, window):
            chunk = toks[start : start + window + 1]
            if len(chunk) < 2:
                break
            loss = lm_loss(model, chunk[None])
            total += loss.item() * (len(chunk) - 1)
            count += len(chunk) - 1
    return total / count


# ---------------------------------------------------------------------------
# draft module


@dataclass
class _Prepared:
    hidden: np.ndarray
    anchors: np.ndarray
    targets: list[list[int]]
    slot_targets: np.ndarray = field(default=None)


def prepare_draft_examples(dataset: Sequence[DistilledExample], base: BaseModel, cfg: TrainConfig) -> list[_Prepared]:
    """Base hidden states are fixed (base frozen), so compute them once per example."""
    mc = base.cfg
    blank = mc.vocab_size - 1
    out = []
    with tc.no_grad():
        for ex in dataset:
            n = len(ex.input_tokens)
            if n < 2:
                continue
            hidden, _, _ = base.forward(ex.input_tokens)
            anchors = np.arange(0, n - 1, cfg.anchor_stride)
            targets = [extract_anchor_targets(ex, int(t), mc.label_horizon, mc.draft_slots) for t in anchors]
            for t in targets:
                assert min_alignment_length(t) <= mc.draft_slots, "infeasible CTC target"
            slots = np.full((len(anchors), mc.draft_slots), blank, dtype=np.int64)
            for i, t in enumerate(targets):
                slots[i, : len(t)] = t
            out.append(_Prepared(hidden.data, anchors, targets, slots))
    return out


def draft_loss(draft: DraftModule, item: _Prepared, loss_mode: str) -> Tensor:
    """Mean over anchors of -log P(target) (CTC) or of summed per-slot CE."""
    blank = draft.cfg.vocab_size - 1
    logp = draft.forward(item.hidden, item.anchors)  # [A, L, V]
    if loss_mode == "ctc":
        lp = ctc_log_prob_batch(logp, item.targets, blank)
        return tc.mul(tc.sum_(lp), -1.0 / len(item.targets))
    picked = tc.take_along_axis(logp, item.slot_targets[:, :, None], axis=-1)
    return tc.mul(tc.sum_(picked), -1.0 / len(item.targets))


def train_draft(dataset: Sequence[DistilledExample], base: BaseModel, cfg: TrainConfig,
                metrics: IO | None = None, draft: DraftModule | None = None,
                prepared: list[_Prepared] | None = None) -> tuple[DraftModule, list[float]]:
    """Train the draft module with the base frozen. Returns the draft and per-epoch mean loss."""
    base.freeze()
    draft = draft or DraftModule(base.cfg, base.lm_head, seed=cfg.seed + 1)
    items = prepared if prepared is not None else prepare_draft_examples(dataset, base, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(draft.params, lr=cfg.lr)
    history: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = order[i : i + cfg.batch_size]
            total = 0.0
            for j in batch:
                loss = draft_loss(draft, items[j], cfg.loss_mode)
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged(f"non-finite draft loss at step {step}", draft)
                tc.mul(loss, 1.0 / len(batch)).backward()
                total += loss.item() / len(batch)
            gn = clip_gradients(draft.params, cfg.clip_threshold)
            opt.lr = scheduled_lr(cfg.lr, step, cfg.epochs * -(-len(items) // cfg.batch_size), cfg.schedule)
            opt.step()
            losses.append(total)
            _emit(metrics, {"step": step, "loss": total, "grad_norm": gn, "lr": opt.lr})
            step += 1
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("draft epoch %d loss %.4f", epoch, history[-1])
        _emit(metrics, {"epoch": epoch, "loss": history[-1]})
    return draft, history


def mean_anchor_nll(draft: DraftModule, items: Sequence[_Prepared]) -> float:
    """Mean per-anchor CTC negative log-likelihood (evaluation)."""
    blank = draft.cfg.vocab_size - 1
    total, count = 0.0, 0
    with tc.no_grad():
        for it in items:
            lp = ctc_log_prob_batch(draft.forward(it.hidden, it.anchors), it.targets, blank)
            total -= float(lp.data.sum())
            count += len(it.targets)
    return total / count
