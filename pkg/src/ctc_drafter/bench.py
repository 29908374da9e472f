"""Acceptance/speedup metrics and the vanilla-vs-speculative benchmark harness."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Sequence

from .decoding import STAGES, DecodeConfig, RunMetrics, generate, generate_autoregressive
from .models import BaseModel, DraftModule, Vocab, params_hash

CSV_COLUMNS = [
    "prompt_id", "mode", "N", "M", "T_seconds", "beta",
    "frac_base", "frac_draft", "frac_transform", "frac_verify", "frac_other",
]
_FRAC_KEYS = dict(zip(STAGES, ["frac_base", "frac_draft", "frac_transform", "frac_verify", "frac_other"]))


class UndefinedMetric(ValueError):
    pass


def compute_beta(N: int, M: int) -> float:
    """Mean tokens committed per base decode step."""
    if M < 1:
        raise UndefinedMetric("beta needs at least one decode step")
    return N / M


def compute_gamma(vanilla: RunMetrics, spec: RunMetrics) -> float:
    """Per-token wall-time ratio ``(T_v/N_v) / (T_s/N_s)``."""
    if vanilla.N <= 0 or spec.N <= 0:
        raise UndefinedMetric("gamma needs runs that emitted tokens")
    if vanilla.T <= 0 or spec.T <= 0:
        raise UndefinedMetric("gamma needs positive wall times")
    return (vanilla.T / vanilla.N) / (spec.T / spec.N)


def stage_fractions(m: RunMetrics) -> dict[str, float]:
    if m.T <= 0:
        return {v: 0.0 for v in _FRAC_KEYS.values()}
    return {_FRAC_KEYS[k]: m.stage_times.get(k, 0.0) / m.T for k in STAGES}


@dataclass
class BenchRow:
    prompt_id: int
    mode: str
    metrics: RunMetrics
    output: list[int]

    def csv_row(self) -> dict:
        m = self.metrics
        row = {"prompt_id": self.prompt_id, "mode": self.mode, "N": m.N, "M": m.M,
               "T_seconds": f"{m.T:.6f}", "beta": f"{compute_beta(m.N, m.M):.6f}"}
        row.update({k: f"{v:.6f}" for k, v in stage_fractions(m).items()})
        return row


@dataclass
class BenchReport:
    rows: list[BenchRow]
    beta: float
    gamma: float
    beta_vanilla: float
    config: dict
    checkpoints: dict
    truncated: int = 0
    mismatches: int = 0
    stage_totals: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "schema": 1,
            "beta": self.beta,
            "gamma": self.gamma,
            "beta_vanilla": self.beta_vanilla,
            "truncated_prompts": self.truncated,
            "greedy_mismatches": self.mismatches,
            "stage_fractions": self.stage_totals,
            "config": self.config,
            "checkpoints": self.checkpoints,
            "runs": [
                {"prompt_id": r.prompt_id, "mode": r.mode, **{k: v for k, v in asdict(r.metrics).items()},
                 "beta": compute_beta(r.metrics.N, r.metrics.M)}
                for r in self.rows
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r.csv_row())
        return buf.getvalue()


def _run_prompt(prompt, base, draft, config, max_new_tokens, repeats):
    runs = {}
    for mode, fn in (("vanilla", lambda: generate_autoregressive(base, prompt, max_new_tokens, config)),
                     ("spec", lambda: generate(base, draft, prompt, max_new_tokens, config))):
        best = None
        for _ in range(repeats):
            out, m = fn()
            if best is None or m.T < best[1].T:
                best = (out, m)
        runs[mode] = best
    return runs


def run_benchmark(prompts: Sequence[str], base: BaseModel, draft: DraftModule, config: DecodeConfig,
                  max_new_tokens: int = 64, repeats: int = 1, parallel: int = 1) -> BenchReport:
    """Vanilla then speculative generation per prompt with identical budgets.

    Truncated (context-overflow) prompts are reported but left out of the
    aggregates. ``repeats`` > 1 keeps the fastest timing of each run. With
    ``parallel`` > 1 prompts run in concurrent sessions over the shared
    (frozen) weights and the report marks its timings as not comparable.
    """
    vocab = Vocab(base.cfg.vocab_size)
    encoded = [vocab.encode(t) for t in prompts]
    job = partial(_run_prompt, base=base, draft=draft, config=config, max_new_tokens=max_new_tokens, repeats=repeats)
    if parallel > 1:
        base.params.freeze()
        draft.params.freeze()
        try:
            with ThreadPoolExecutor(parallel) as pool:
                results = list(pool.map(job, encoded))
        finally:
            base.params.unfreeze()
            draft.params.unfreeze()
    else:
        results = [job(p) for p in encoded]

    rows: list[BenchRow] = []
    tot = {"vanilla": RunMetrics(), "spec": RunMetrics()}
    truncated = mismatches = 0
    for pid, runs in enumerate(results):
        bad = any(m.truncated for _, m in runs.values())
        for mode, (out, m) in runs.items():
            b = compute_beta(m.N, m.M)
            assert b >= 1.0, f"beta {b} < 1 for prompt {pid} ({mode})"
            rows.append(BenchRow(pid, mode, m, out))
            if not bad:
                agg = tot[mode]
                agg.N += m.N
                agg.M += m.M
                agg.T += m.T
                for k, v in m.stage_times.items():
                    agg.stage_times[k] += v
        if bad:
            truncated += 1
        elif config.mode == "greedy" and runs["vanilla"][0] != runs["spec"][0]:
            mismatches += 1
    v, s = tot["vanilla"], tot["spec"]
    return BenchReport(
        rows=rows,
        beta=compute_beta(s.N, s.M),
        gamma=compute_gamma(v, s),
        beta_vanilla=compute_beta(v.N, v.M),
        config={**asdict(config), "max_new_tokens": max_new_tokens, "model": base.cfg.to_dict(),
                "parallel": parallel, "timing_comparable": parallel <= 1},
        checkpoints={"base": params_hash(base.params), "draft": params_hash(draft.params)},
        truncated=truncated,
        mismatches=mismatches,
        stage_totals=stage_fractions(s),
    )
