import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctc_drafter import tensor_core as tc
from ctc_drafter.ctc import (EnumerationTooLarge, InfeasibleTarget, ZeroProbabilityPrefix,
                             brute_force_distribution, brute_force_log_prob, brute_force_prefix_marginals,
                             collapse, collapsed_prefix_marginals, ctc_log_prob, ctc_log_prob_batch,
                             min_alignment_length)
from ctc_drafter.selfcheck import random_log_probs

A, B, EPS = 0, 1, 2  # tiny alphabet used by the hand examples
UNIFORM2 = np.log(np.full((2, 3), 1 / 3))


def test_collapse_examples():
    assert collapse([A, A, EPS, B], EPS) == ([A, B], [0, 3])
    assert collapse([EPS, EPS, EPS], EPS) == ([], [])
    assert collapse([A, EPS, A], EPS)[0] == [A, A]


def test_min_alignment_length():
    assert min_alignment_length([A, B]) == 2
    assert min_alignment_length([A, A]) == 3
    assert min_alignment_length([]) == 0


def test_uniform_examples():
    with tc.precision(np.float64):
        assert ctc_log_prob(tc.Tensor(UNIFORM2), [A], EPS).item() == pytest.approx(math.log(1 / 3), abs=1e-12)
        assert ctc_log_prob(tc.Tensor(UNIFORM2), [A, B], EPS).item() == pytest.approx(math.log(1 / 9), abs=1e-12)
    with pytest.raises(InfeasibleTarget):
        ctc_log_prob(tc.Tensor(UNIFORM2), [A, A], EPS)


def test_empty_target_all_blank():
    lp = np.log(np.array([[1e-300, 1e-300, 1.0]] * 3))
    assert brute_force_log_prob(lp, [], EPS) == pytest.approx(0.0, abs=1e-12)
    with tc.precision(np.float64):
        assert ctc_log_prob(tc.Tensor(lp), [], EPS).item() == pytest.approx(0.0, abs=1e-12)


def test_total_probability_sums_to_one():
    rng = np.random.default_rng(0)
    for _ in range(10):
        L, V = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        lp = random_log_probs(rng, L, V)
        assert sum(brute_force_distribution(lp, V - 1).values()) == pytest.approx(1.0, abs=1e-9)


def test_enumeration_guard():
    with pytest.raises(EnumerationTooLarge):
        brute_force_log_prob(np.zeros((20, 5)), [0], 4)


def _feasible_instances(n, seed, max_l=5, max_v=5):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        L, V = int(rng.integers(1, max_l + 1)), int(rng.integers(2, max_v + 1))
        t = [int(x) for x in rng.integers(0, V - 1, size=int(rng.integers(0, L + 1)))]
        if min_alignment_length(t) <= L:
            out.append((random_log_probs(rng, L, V), t, V - 1))
    return out


def test_ctc_matches_brute_force_200():
    with tc.precision(np.float64):
        for lp, t, blank in _feasible_instances(200, seed=11):
            got = ctc_log_prob(tc.Tensor(lp), t, blank).item()
            assert abs(got - brute_force_log_prob(lp, t, blank)) < 1e-6


def test_batch_matches_single():
    rng = np.random.default_rng(3)
    with tc.precision(np.float64):
        lp = np.stack([random_log_probs(rng, 5, 4) for _ in range(3)])
        targets = [[0], [1, 1], [0, 2, 1]]
        got = ctc_log_prob_batch(tc.Tensor(lp), targets, 3).data
        for b in range(3):
            assert got[b] == pytest.approx(ctc_log_prob(tc.Tensor(lp[b]), targets[b], 3).item(), abs=1e-12)


def test_ctc_gradient_vs_finite_differences():
    for lp, t, blank in _feasible_instances(20, seed=5):
        assert tc.gradcheck(lambda x: ctc_log_prob(x, t, blank), [lp]) < 1e-4


def test_float32_path_stays_finite_on_peaked_rows():
    lp = np.full((5, 4), -200.0)
    lp[:, 3] = 0.0
    out = ctc_log_prob(tc.Tensor(lp.astype(np.float32)), [1], 3).item()
    assert np.isfinite(out) and out < -150


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_ctc_property_vs_enumeration(L, V, seed):
    rng = np.random.default_rng(seed)
    lp = random_log_probs(rng, L, V)
    t = [int(x) for x in rng.integers(0, V - 1, size=int(rng.integers(0, L + 1)))]
    if min_alignment_length(t) > L:
        with pytest.raises(InfeasibleTarget):
            ctc_log_prob(tc.Tensor(lp), t, V - 1)
        return
    with tc.precision(np.float64):
        assert ctc_log_prob(tc.Tensor(lp), t, V - 1).item() == pytest.approx(brute_force_log_prob(lp, t, V - 1), abs=1e-8)


# ---------------------------------------------------------------------------
# collapsed-prefix marginals


def test_marginals_single_slot():
    lp = np.log([[0.5, 0.3, 0.2]])
    nxt, end = collapsed_prefix_marginals(lp, [], EPS)
    np.testing.assert_allclose(nxt, [0.5, 0.3, 0.0], atol=1e-12)
    assert end == pytest.approx(0.2)


def test_marginals_uniform_first_token():
    nxt, _ = collapsed_prefix_marginals(UNIFORM2, [], EPS)
    assert nxt[A] == pytest.approx(4 / 9, abs=1e-12)


def test_marginals_zero_prefix():
    lp = np.log([[1.0, 1e-300, 1e-300]])
    lp[0, 1:] = -np.inf
    with pytest.raises(ZeroProbabilityPrefix):
        collapsed_prefix_marginals(lp, [1], 2)


@pytest.mark.parametrize("seed", range(4))
def test_marginals_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    for _ in range(25):
        L, V = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        lp = random_log_probs(rng, L, V)
        prefix = [int(x) for x in rng.integers(0, V - 1, size=int(rng.integers(0, L)))]
        try:
            ref = brute_force_prefix_marginals(lp, prefix, V - 1)
        except ZeroProbabilityPrefix:
            with pytest.raises(ZeroProbabilityPrefix):
                collapsed_prefix_marginals(lp, prefix, V - 1)
            continue
        nxt, end = collapsed_prefix_marginals(lp, prefix, V - 1)
        np.testing.assert_allclose(nxt, ref[0], atol=1e-8)
        assert end == pytest.approx(ref[1], abs=1e-8)
        assert nxt.sum() + end == pytest.approx(1.0, abs=1e-6)
