"""Teacher-argmax labels from the frozen base model, and per-anchor CTC targets."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor_core as tc
from .ctc import min_alignment_length
from .models import BaseModel, params_hash


@dataclass
class DistilledExample:
    input_tokens: list[int]
    distilled_labels: list[int]

    def __post_init__(self):
        if len(self.input_tokens) != len(self.distilled_labels):
            raise ValueError("labels must align one-to-one with inputs")


def split_chunks(tokens: Sequence[int], max_len: int) -> list[list[int]]:
    """Windows of at most ``max_len`` tokens; consecutive windows share one token."""
    tokens = list(tokens)
    if len(tokens) <= max_len:
        return [tokens]
    out = []
    start = 0
    while True:
        out.append(tokens[start : start + max_len])
        if start + max_len >= len(tokens):
            return out
        start += max_len - 1


def make_distilled_dataset(corpus: Iterable[Sequence[int]], base: BaseModel) -> list[DistilledExample]:
    """One teacher-forced base pass per chunk; label[t] = argmax of the logits at t."""
    out: list[DistilledExample] = []
    blank = base.cfg.vocab_size - 1
    with tc.no_grad():
        for seq in corpus:
            for chunk in split_chunks(seq, base.cfg.max_seq_len):
                if not chunk:
                    continue
                _, logits, _ = base.forward(chunk)
                lg = logits.data.copy()
                lg[:, blank] = -np.inf  # blank is not an output token of the base model
                labels = np.argmax(lg, axis=-1)
                out.append(DistilledExample(list(map(int, chunk)), labels.astype(int).tolist()))
    return out


def extract_anchor_targets(ex: DistilledExample, t: int, m_max: int, L: int) -> list[int]:
    """Teacher labels ``t+1 .. t+m`` with the largest feasible ``m <= m_max`` that stays inside the example."""
    n = len(ex.input_tokens)
    if not 0 <= t < n - 1:
        raise IndexError(f"anchor {t} outside [0, {n - 1})")
    m = min(m_max, n - 1 - t)
    while m > 0 and min_alignment_length(ex.distilled_labels[t + 1 : t + 1 + m]) > L:
        m -= 1
    return list(ex.distilled_labels[t + 1 : t + 1 + m])


# ---------------------------------------------------------------------------
# dataset file: JSON header line, then per example two length-prefixed u32 arrays (inputs, labels)


def write_dataset(path, examples: Sequence[DistilledExample], base: BaseModel | None = None, extra: dict | None = None) -> None:
    header = {"format": "ctc-drafter-distilled", "version": 1, "count": len(examples)}
    if base is not None:
        header["checkpoint"] = params_hash(base.params)
        header["config"] = base.cfg.to_dict()
    header.update(extra or {})
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for ex in examples:
            for arr in (ex.input_tokens, ex.distilled_labels):
                f.write(struct.pack("<I", len(arr)))
                f.write(np.asarray(arr, dtype="<u4").tobytes())


def read_dataset(path) -> tuple[dict, list[DistilledExample]]:
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("utf-8"))
    off = nl + 1
    arrays = []
    while off < len(blob):
        if off + 4 > len(blob):
            raise ValueError(f"{path}: truncated record header at byte {off}")
        (n,) = struct.unpack("<I", blob[off : off + 4])
        off += 4
        if off + 4 * n > len(blob):
            raise ValueError(f"{path}: truncated record at byte {off}")
        arrays.append(np.frombuffer(blob[off : off + 4 * n], dtype="<u4").astype(int).tolist())
        off += 4 * n
    if len(arrays) % 2:
        raise ValueError(f"{path}: odd number of arrays")
    examples = [DistilledExample(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
    if header.get("count", len(examples)) != len(examples):
        raise ValueError(f"{path}: header promises {header['count']} examples, found {len(examples)}")
    return header, examples
