import numpy as np
import pytest

from ctc_drafter.distill import (DistilledExample, extract_anchor_targets, make_distilled_dataset, read_dataset,
                                 split_chunks, write_dataset)
from ctc_drafter.models import BaseModel, ModelConfig

A, B, C = 97, 98, 99


def test_memorized_base_labels_are_shifted_corpus(tiny):
    hits = total = 0
    for ex in tiny.dataset:
        x, y = np.array(ex.input_tokens), np.array(ex.distilled_labels)
        hits += int((y[:-1] == x[1:]).sum())
        total += len(x) - 1
    assert hits / total >= 0.95


def test_argmax_tie_lowest_id():
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, max_seq_len=16)
    base = BaseModel(cfg)
    base.lm_head.data[:] = 0.0  # every logit equal
    (ex,) = make_distilled_dataset([[5, 6, 7]], base)
    assert ex.distilled_labels == [0, 0, 0]


def test_labels_never_blank():
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, max_seq_len=16)
    base = BaseModel(cfg)
    base.lm_head.data[:, cfg.vocab_size - 1] = 50.0
    (ex,) = make_distilled_dataset([[5, 6, 7]], base)
    assert cfg.vocab_size - 1 not in ex.distilled_labels


def test_empty_corpus():
    base = BaseModel(ModelConfig(d_model=16, n_layers=1, n_heads=2, max_seq_len=16))
    assert make_distilled_dataset([], base) == []
    assert make_distilled_dataset([[]], base) == []


def _ex(labels):
    return DistilledExample([0] * (len(labels) + 1), [0] + list(labels))


def test_targets_examples():
    assert extract_anchor_targets(_ex([A, B, C]), 0, 3, 5) == [A, B, C]
    assert extract_anchor_targets(_ex([A, A, A]), 0, 3, 5) == [A, A, A]
    assert extract_anchor_targets(_ex([A, A, A]), 0, 3, 4) == [A, A]


def test_targets_stop_at_example_end():
    ex = _ex([A, B, C])
    assert extract_anchor_targets(ex, 2, 3, 5) == [C]
    with pytest.raises(IndexError):
        extract_anchor_targets(ex, 3, 3, 5)


def test_split_chunks_overlap():
    chunks = split_chunks(list(range(10)), 4)
    assert chunks == [[0, 1, 2, 3], [3, 4, 5, 6], [6, 7, 8, 9]]
    assert split_chunks([1, 2], 4) == [[1, 2]]


def test_dataset_round_trip(tmp_path, tiny):
    p = tmp_path / "d.bin"
    write_dataset(p, tiny.dataset, tiny.base)
    header, back = read_dataset(p)
    assert header["count"] == len(tiny.dataset)
    assert [(e.input_tokens, e.distilled_labels) for e in back] == [
        (e.input_tokens, e.distilled_labels) for e in tiny.dataset]


def test_misaligned_example_rejected():
    with pytest.raises(ValueError):
        DistilledExample([1, 2], [1])
