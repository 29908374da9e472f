import warnings

import numpy as np
import pytest

from ctc_drafter import tensor_core as tc
from ctc_drafter.tensor_core import Adam, ParamStore, ShapeError, TapeError, Tensor


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tc.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_softmax_uniform():
    np.testing.assert_allclose(tc.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)


def test_logsumexp_of_log_probs_is_zero():
    out = tc.logsumexp(Tensor(np.log([0.25, 0.75])))
    assert abs(out.item()) < 1e-7


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2,\)"):
        tc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_broadcast_rules_leading_batch_and_scalar():
    x = Tensor(np.ones((4, 2, 3)))
    assert tc.add(x, Tensor(np.ones(3))).shape == (4, 2, 3)
    assert tc.add(x, Tensor(np.ones((2, 3)))).shape == (4, 2, 3)
    assert tc.mul(x, 2.0).shape == (4, 2, 3)
    with pytest.raises(ShapeError):
        tc.add(x, Tensor(np.ones((4, 1, 3))))


def test_backward_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tc.sum_(tc.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_log_softmax_grad_rows_sum_to_zero():
    x = Tensor(np.zeros((3, 5)), requires_grad=True)
    w = Tensor(np.random.default_rng(0).standard_normal((3, 5)))
    tc.sum_(tc.mul(tc.log_softmax(x), w)).backward()
    np.testing.assert_allclose(x.grad.sum(axis=1), 0.0, atol=1e-6)


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError):
        tc.mul(x, 2.0).backward()


def test_second_backward_on_same_tape_is_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tc.sum_(tc.mul(x, x))
    loss.backward()
    with pytest.raises(TapeError):
        loss.backward()


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = tc.add(tc.mul(x, 2.0), tc.mul(x, 5.0))
    tc.sum_(y).backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_attention_mask_gives_zero_weight():
    rng = np.random.default_rng(0)
    q, k = Tensor(rng.standard_normal((1, 2, 4))), Tensor(rng.standard_normal((1, 3, 4)))
    v = Tensor(np.eye(3)[None])  # output rows are the attention weights
    mask = np.array([[0.0, tc.MASKED, 0.0], [tc.MASKED, tc.MASKED, 0.0]], dtype=np.float32)
    w = tc.attention(q, k, v, mask).data[0]
    assert w[0, 1] == 0.0 and w[1, 0] == 0.0 and w[1, 1] == 0.0
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_rows_normalized(seed):
    x = np.random.default_rng(seed).standard_normal((7, 11)) * 10
    np.testing.assert_allclose(tc.softmax(Tensor(x)).data.sum(-1), 1.0, atol=1e-6)


def _primitive_cases(rng):
    def r(*s):
        return rng.standard_normal(s)

    n, k, m = (int(x) for x in rng.integers(1, 5, size=3))
    ids = rng.integers(0, 5, size=(2, 3))
    idx = rng.integers(0, m, size=(n, 2))
    return {
        "matmul": (tc.matmul, [r(n, k), r(k, m)]),
        "batched_matmul": (tc.matmul, [r(2, n, k), r(2, k, m)]),
        "add": (tc.add, [r(2, n, m), r(n, m)]),
        "sub": (tc.sub, [r(n, m), r(n, m)]),
        "mul": (tc.mul, [r(2, n, m), r(m)]),
        "exp": (tc.exp, [r(n, m)]),
        "log": (tc.log, [np.abs(r(n, m)) + 0.5]),
        "embedding": (lambda w: tc.embedding(w, ids), [r(5, m)]),
        "softmax": (tc.softmax, [r(n, m)]),
        "log_softmax": (tc.log_softmax, [r(n, m)]),
        "logsumexp": (tc.logsumexp, [r(2, n, m)]),
        "layer_norm": (tc.layer_norm, [r(n, 4), r(4), r(4)]),
        "gelu": (tc.gelu, [r(n, m)]),
        "silu": (tc.silu, [r(n, m)]),
        "attention": (lambda q, kk, v: tc.attention(q, kk, v, np.triu(np.full((3, 3), tc.MASKED), 1)),
                      [r(2, 3, 4), r(2, 3, 4), r(2, 3, 2)]),
        "slice": (lambda x: x[:, 1:], [r(n, m + 1)]),
        "concat": (lambda a, b: tc.concat([a, b], axis=1), [r(n, m), r(n, k)]),
        "stack": (lambda a, b: tc.stack([a, b], axis=-1), [r(n, m), r(n, m)]),
        "reshape": (lambda x: tc.reshape(x, (m, n)), [r(n, m)]),
        "transpose": (lambda x: tc.transpose(x, (1, 0, 2)), [r(n, m, 2)]),
        "broadcast_to": (lambda x: tc.broadcast_to(x, (n, 3, m)), [r(n, 1, m)]),
        "take_along_axis": (lambda x: tc.take_along_axis(x, idx, axis=1), [r(n, m)]),
        "sum_axis": (lambda x: tc.sum_(x, axis=1), [r(n, m)]),
        "mean": (lambda x: tc.mean(x, axis=0), [r(n, m)]),
    }


PRIMS = sorted(_primitive_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", PRIMS)
def test_primitive_gradients_vs_finite_differences(name):
    """>= 20 seeded random-shape trials per primitive, 64-bit, h=1e-4, rel. error < 1e-5."""
    for seed in range(20):
        fn, inputs = _primitive_cases(np.random.default_rng(seed))[name]
        assert tc.gradcheck(fn, inputs, h=1e-4) < 1e-5, (name, seed)


def test_matmul_gradcheck_tight():
    rng = np.random.default_rng(7)
    assert tc.gradcheck(tc.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]) < 1e-6


def test_default_dtype_switch():
    assert Tensor([1.0]).dtype == np.float32
    with tc.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# ---------------------------------------------------------------------------
# ParamStore / optimizer / clipping


def _store(*grads):
    ps = ParamStore()
    for i, g in enumerate(grads):
        t = Tensor(np.zeros(len(g), dtype=np.float64), requires_grad=True)
        t.grad = np.asarray(g, dtype=np.float64)
        ps[f"p{i}"] = t
    return ps


def test_param_names_unique():
    ps = _store([1.0])
    with pytest.raises(KeyError):
        ps["p0"] = Tensor([0.0])


def test_adam_first_step_magnitude_is_lr():
    ps = _store([1.0])
    Adam(ps, lr=0.1).step()
    assert ps["p0"].data[0] == pytest.approx(-0.1, rel=1e-6)
    assert ps["p0"].grad is None


def test_adam_zero_grad_leaves_param():
    ps = _store([0.0])
    Adam(ps, lr=0.1).step()
    assert ps["p0"].data[0] == 0.0


def test_adam_two_steps_hand_recurrence():
    ps = _store([1.0])
    opt = Adam(ps, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    opt.step()
    first = ps["p0"].data[0]
    ps["p0"].grad = np.array([1.0])
    opt.step()
    # constant grad: m_hat = v_hat = 1 each step, so each step moves by lr/(1+eps)
    assert first < 0 and ps["p0"].data[0] < first
    assert ps["p0"].data[0] == pytest.approx(-0.2, rel=1e-6)


def test_adam_skips_non_finite():
    ps = _store([np.nan])
    opt = Adam(ps, lr=0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert opt.step() is False
    assert opt.skipped == 1
    assert ps["p0"].data[0] == 0.0


def test_clip_scales_to_threshold():
    ps = _store([0.6, 0.8])
    assert tc.clip_gradients(ps, 0.5) == pytest.approx(1.0)
    assert np.linalg.norm(ps["p0"].grad) == pytest.approx(0.5)


def test_clip_below_threshold_unchanged():
    ps = _store([0.3, 0.0])
    assert tc.clip_gradients(ps, 0.5) == pytest.approx(0.3)
    np.testing.assert_array_equal(ps["p0"].grad, [0.3, 0.0])


def test_clip_all_zero():
    ps = _store([0.0, 0.0])
    assert tc.clip_gradients(ps, 0.5) == 0.0
    np.testing.assert_array_equal(ps["p0"].grad, [0.0, 0.0])


def test_frozen_store_is_read_only():
    ps = _store([1.0]).freeze()
    with pytest.raises(ValueError):
        ps["p0"].data[0] = 3.0
    with pytest.raises(RuntimeError):
        Adam(ps).step()
    ps.unfreeze()
    ps["p0"].data[0] = 3.0
