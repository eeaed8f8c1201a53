"""Tensor core: primitives against finite differences and loop oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv3d_loops, numeric_grad, rel_error
from volformer.errors import ShapeError, StateError
from volformer import tensor as T
from volformer.tensor import Tensor


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def check_grads(f, tensors, tol=1e-5, h=1e-5):
    """Autodiff grads of scalar f(tensors) vs central differences."""
    out = f()
    T.zero_grads(tensors)
    out.backward()
    numeric = numeric_grad(lambda: f().item(), tensors, h=h)
    for tt, want in zip(tensors, numeric):
        assert tt.grad is not None
        err = rel_error(tt.grad, want)
        assert err < tol, f"gradient mismatch {err:.3g} for shape {tt.data.shape}"


# ---------------------------------------------------------------------------
# hand-checked values


def test_mean_var_hand_values():
    m, v = T.mean_var(Tensor([1.0, 2.0, 3.0]))
    assert m.item() == pytest.approx(2.0, abs=1e-7)
    assert v.item() == pytest.approx(2.0 / 3.0, abs=1e-7)


def test_matmul_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.allclose(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_relu_subgradient_zero_at_zero():
    x = t64([-1.0, 0.0, 2.0])
    y = T.tensor_sum(T.relu(x))
    y.backward()
    assert np.allclose(x.grad, [0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# gradient checks, float64, central differences


def test_grad_add_sub_mul_div():
    rng = np.random.default_rng(0)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(3, 4)) + 3.0)
    check_grads(lambda: T.tensor_sum(T.mul(T.add(a, b), T.div(T.sub(a, b), b))), [a, b])


def test_grad_broadcast_add_mul():
    rng = np.random.default_rng(1)
    a = t64(rng.normal(size=(2, 3, 4)))
    b = t64(rng.normal(size=(4,)))
    c = t64(rng.normal(size=(3, 1)))
    check_grads(lambda: T.tensor_sum(T.mul(T.add(a, b), c)), [a, b, c])


def test_grad_exp_log_sqrt():
    rng = np.random.default_rng(2)
    x = t64(rng.uniform(0.5, 2.0, size=(5,)))
    check_grads(lambda: T.tensor_sum(T.exp(T.log(T.sqrt(x)))), [x])


def test_grad_matmul():
    rng = np.random.default_rng(3)
    a = t64(rng.normal(size=(4, 5)))
    b = t64(rng.normal(size=(5, 3)))
    check_grads(lambda: T.tensor_sum(T.matmul(a, b)), [a, b])


def test_grad_matmul_weighted():
    rng = np.random.default_rng(4)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(4, 2)))
    w = Tensor(rng.normal(size=(3, 2)))
    check_grads(lambda: T.tensor_sum(T.mul(T.matmul(a, b), w)), [a, b])


def test_grad_matmul_batched_and_vector():
    rng = np.random.default_rng(5)
    a = t64(rng.normal(size=(2, 3, 4)))
    b = t64(rng.normal(size=(2, 4, 3)))
    check_grads(lambda: T.tensor_sum(T.matmul(a, b)), [a, b])
    w = t64(rng.normal(size=(3, 4)))
    v = t64(rng.normal(size=(4,)))
    check_grads(lambda: T.tensor_sum(T.matmul(w, v)), [w, v])


def test_grad_reductions_and_shapes():
    rng = np.random.default_rng(6)
    x = t64(rng.normal(size=(2, 3, 4)))
    check_grads(lambda: T.tensor_sum(T.mul(T.mean(x, (0, 2)), T.mean(x, (0, 2)))), [x])
    check_grads(lambda: T.tensor_sum(T.mul(T.transpose(T.reshape(x, (6, 4))), 2.0)), [x])


def test_grad_concat_narrow_select():
    rng = np.random.default_rng(7)
    a = t64(rng.normal(size=(3, 2)))
    b = t64(rng.normal(size=(3, 4)))
    labels = np.array([0, 3, 1])

    def f():
        cat = T.concat([a, b], axis=1)
        mid = T.narrow(cat, 1, 1, 4)
        return T.tensor_sum(T.mul(T.select_index(cat, labels), 1.5)) + T.tensor_sum(mid)

    check_grads(f, [a, b])


def test_grad_softmax_and_log_softmax():
    rng = np.random.default_rng(8)
    x = t64(rng.normal(size=(4, 6)))
    w = Tensor(rng.normal(size=(4, 6)))
    check_grads(lambda: T.tensor_sum(T.mul(T.softmax(x, -1), w)), [x])
    check_grads(lambda: T.tensor_sum(T.mul(T.log_softmax(x, -1), w)), [x])


def test_grad_mean_var():
    rng = np.random.default_rng(9)
    x = t64(rng.normal(size=(3, 5)))

    def f():
        m, v = T.mean_var(x, 1)
        return T.tensor_sum(T.add(T.mul(m, m), v))

    check_grads(f, [x])


def test_grad_avg_pool_global():
    rng = np.random.default_rng(10)
    x = t64(rng.normal(size=(2, 3, 2, 3, 2)))
    w = Tensor(rng.normal(size=(2, 3)))
    check_grads(lambda: T.tensor_sum(T.mul(T.avg_pool_global(x), w)), [x])


def test_grad_batch_norm_training():
    rng = np.random.default_rng(11)
    x = t64(rng.normal(size=(4, 3, 2, 2, 2)))
    gamma = t64(rng.uniform(0.5, 1.5, size=3))
    beta = t64(rng.normal(size=3))
    w = Tensor(rng.normal(size=(4, 3, 2, 2, 2)))
    check_grads(
        lambda: T.tensor_sum(T.mul(T.batch_norm(x, gamma, beta, True), w)),
        [x, gamma, beta], tol=1e-4,
    )


def test_grad_conv3d():
    rng = np.random.default_rng(12)
    x = t64(rng.normal(size=(2, 4, 5, 4)))
    w = t64(rng.normal(size=(3, 2, 3, 3, 3)))
    check_grads(lambda: T.tensor_sum(T.conv3d(x, w, stride=2, pad=1)), [x, w], tol=1e-4)


def test_grad_conv3d_batched():
    rng = np.random.default_rng(13)
    x = t64(rng.normal(size=(2, 2, 4, 4, 4)))
    w = t64(rng.normal(size=(2, 2, 3, 3, 3)))
    m = Tensor(rng.normal(size=(2, 2, 4, 4, 4)))
    check_grads(lambda: T.tensor_sum(T.mul(T.conv3d(x, w, 1, 1), m)), [x, w], tol=1e-4)


# ---------------------------------------------------------------------------
# conv3d against the nested-loop oracle


@pytest.mark.parametrize("shape,kout,k,stride,pad", [
    ((1, 4, 4, 4), 2, 3, 1, 1),
    ((2, 8, 8, 8), 3, 3, 2, 1),
    ((2, 5, 6, 7), 2, 1, 1, 0),
    ((1, 8, 8, 8), 2, 7, 2, 3),
    ((2, 7, 8, 6), 4, 3, 2, 1),
    ((2, 8, 7, 8), 1, 3, 1, 0),
])
def test_conv3d_matches_loop_oracle(shape, kout, k, stride, pad):
    rng = np.random.default_rng(hash((shape, kout, k, stride, pad)) % 2**32)
    x = rng.normal(size=shape)
    w = rng.normal(size=(kout, shape[0], k, k, k))
    got = T.conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride, pad)
    want = conv3d_loops(x, w, stride, pad)
    assert got.data.shape == want.shape
    assert rel_error(got.data, want) < 1e-6


def test_conv3d_ceil_output_extents():
    # Same-padded stride-2 convs halve extents with ceiling rounding.
    for extent, want in [(9, 5), (5, 3), (2, 1), (16, 8), (18, 9)]:
        x = Tensor(np.zeros((1, extent, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 3, 3, 3), dtype=np.float32))
        out = T.conv3d(x, w, stride=2, pad=1)
        assert out.shape[1] == want
    x = Tensor(np.zeros((1, 64, 72, 64), dtype=np.float32))
    w = Tensor(np.zeros((2, 1, 7, 7, 7), dtype=np.float32))
    assert T.conv3d(x, w, stride=2, pad=3).shape == (2, 32, 36, 32)


def test_conv3d_channel_mismatch_names_shapes():
    x = Tensor(np.zeros((2, 4, 4, 4)))
    w = Tensor(np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(ShapeError) as exc:
        T.conv3d(x, w, 1, 1)
    assert "(2, 4, 4, 4)" in str(exc.value) and "(1, 3, 3, 3, 3)" in str(exc.value)


def test_conv3d_kernel_exceeds_padded_input():
    x = Tensor(np.zeros((1, 2, 2, 2)))
    w = Tensor(np.zeros((1, 1, 7, 7, 7)))
    with pytest.raises(ShapeError):
        T.conv3d(x, w, 1, 1)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


# ---------------------------------------------------------------------------
# autodiff mechanics


def test_gradients_accumulate_across_uses():
    x = t64([3.0])
    y = T.add(T.mul(x, x), x)  # d/dx (x^2 + x) = 2x + 1
    T.tensor_sum(y).backward()
    assert np.allclose(x.grad, [7.0])


def test_untracked_tensor_never_receives_grad():
    x = t64([1.0, 2.0])
    c = Tensor(np.array([3.0, 4.0]), requires_grad=False)
    T.tensor_sum(T.mul(x, c)).backward()
    assert c.grad is None
    assert np.allclose(x.grad, [3.0, 4.0])


def test_backward_rejects_non_scalar():
    x = t64([[1.0, 2.0]])
    with pytest.raises(ShapeError):
        T.mul(x, 2.0).backward()


def test_backward_without_tracked_inputs_is_state_error():
    with pytest.raises(StateError):
        T.tensor_sum(Tensor([1.0, 2.0])).backward()


def test_no_grad_suppresses_recording():
    x = t64([1.0])
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._backward is None


def test_backward_visits_shared_subgraph_once():
    x = t64([2.0])
    shared = T.mul(x, x)
    total = T.add(T.tensor_sum(shared), T.tensor_sum(T.mul(shared, 3.0)))
    total.backward()
    # d/dx (x^2 + 3x^2) = 8x
    assert np.allclose(x.grad, [16.0])


def test_split_batch_gradients_match_full_batch():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(6, 5)).astype(np.float64)
    w = t64(rng.normal(size=(5, 3)))

    def loss_for(batch):
        return T.tensor_sum(T.relu(T.matmul(Tensor(batch, dtype=np.float64), w)))

    T.zero_grads([w])
    loss_for(x).backward()
    full = w.grad.copy()
    T.zero_grads([w])
    loss_for(x[:3]).backward()
    loss_for(x[3:]).backward()
    assert rel_error(w.grad, full) < 1e-12


def test_dtype_follows_inputs():
    x32 = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = T.mul(T.add(x32, 1.0), 0.5)
    assert y.dtype == np.float32
    T.tensor_sum(y).backward()
    assert x32.grad.dtype == np.float32
    x64 = t64(np.ones((2, 2)))
    assert T.mul(x64, 2.0).dtype == np.float64


def test_count_ops_matmul_exact():
    a = Tensor(np.zeros((3, 4)))
    b = Tensor(np.zeros((4, 5)))
    with T.count_ops() as ops:
        T.matmul(a, b)
    assert ops.macs == 3 * 4 * 5


# ---------------------------------------------------------------------------
# softmax and batch norm behavior


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 7), st.floats(-30, 30), st.integers(0, 2**31 - 1))
def test_softmax_rows_stochastic_and_shift_invariant(rows, cols, shift, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(rows, cols))
    p = T.softmax(Tensor(x, dtype=np.float64), -1).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    q = T.softmax(Tensor(x + shift, dtype=np.float64), -1).data
    assert np.allclose(p, q, atol=1e-9)


def test_softmax_extreme_logits_stay_normalized():
    x = Tensor(np.array([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]], dtype=np.float32))
    p = T.softmax(x, -1).data
    assert np.all(np.isfinite(p))
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_batch_norm_standardizes_batch():
    rng = np.random.default_rng(15)
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 2, 2, 2)).astype(np.float32))
    gamma = Tensor(np.ones(3, dtype=np.float32))
    beta = Tensor(np.zeros(3, dtype=np.float32))
    y = T.batch_norm(x, gamma, beta, training=True).data
    for c in range(3):
        ch = y[:, c]
        assert abs(ch.mean()) < 1e-5
        assert abs(ch.var() - 1.0) < 1e-3


def test_batch_norm_running_stats_and_eval():
    rng = np.random.default_rng(16)
    stats = T.RunningStats()
    gamma = Tensor(np.ones(2, dtype=np.float32))
    beta = Tensor(np.zeros(2, dtype=np.float32))
    x1 = rng.normal(1.0, 1.0, size=(8, 2, 2, 2, 2)).astype(np.float32)
    x2 = rng.normal(2.0, 3.0, size=(8, 2, 2, 2, 2)).astype(np.float32)
    T.batch_norm(Tensor(x1), gamma, beta, True, stats)
    m1 = x1.mean(axis=(0, 2, 3, 4))
    v1 = x1.var(axis=(0, 2, 3, 4))
    assert np.allclose(stats.mean, m1, atol=1e-6)
    assert np.allclose(stats.var, v1, atol=1e-6)
    T.batch_norm(Tensor(x2), gamma, beta, True, stats, momentum=0.1)
    m2 = x2.mean(axis=(0, 2, 3, 4))
    assert np.allclose(stats.mean, 0.9 * m1 + 0.1 * m2, atol=1e-6)
    y = T.batch_norm(Tensor(x2), gamma, beta, False, stats).data
    want = (x2 - stats.mean.reshape(1, 2, 1, 1, 1)) / np.sqrt(
        stats.var.reshape(1, 2, 1, 1, 1) + 1e-5)
    assert np.allclose(y, want, atol=1e-5)


def test_batch_norm_eval_without_stats_is_state_error():
    x = Tensor(np.zeros((2, 2, 1, 1, 1)))
    gamma = Tensor(np.ones(2))
    beta = Tensor(np.zeros(2))
    with pytest.raises(StateError):
        T.batch_norm(x, gamma, beta, training=False, stats=T.RunningStats())


def test_cross_entropy_gradient_is_probs_minus_onehot():
    rng = np.random.default_rng(17)
    logits = t64(rng.normal(size=(3, 4)))
    labels = np.array([1, 3, 0])
    nll = T.neg(T.select_index(T.log_softmax(logits, -1), labels))
    T.tensor_sum(nll).backward()
    p = T.softmax(Tensor(logits.data), -1).data
    onehot = np.zeros((3, 4))
    onehot[np.arange(3), labels] = 1.0
    assert rel_error(logits.grad, p - onehot) < 1e-10
