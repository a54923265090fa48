import numpy as np
import pytest

from capdet import tensor as T
from capdet.tensor import ShapeError, Tensor, backward, no_grad


def leaf(values, grad=True):
    return Tensor(np.asarray(values, dtype=np.float32), requires_grad=grad)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_computed():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_empty_inner_dimension():
    out = T.matmul(Tensor(np.zeros((3, 0))), Tensor(np.zeros((0, 2))))
    assert out.shape == (3, 2)
    assert not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_linear_matches_numpy(rng):
    x = rng.normal(size=(2, 5, 3)).astype(np.float32)
    w = rng.normal(size=(4, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    out = T.linear(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, x @ w.T + b, rtol=1e-6)


# ---------------------------------------------------------------- softmax / CE


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_stable(Tensor([0.0, 0, 0])).data, [1 / 3] * 3, rtol=1e-6)


def test_softmax_large_logits_do_not_overflow():
    out = T.softmax_stable(Tensor([1000.0, 0.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_reference_values():
    out = T.softmax_stable(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-4)


def test_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(scale=20, size=(6, 9)))
    for axis in (0, 1, -1):
        s = T.softmax_stable(x, axis).data.sum(axis=axis)
        np.testing.assert_allclose(s, 1.0, atol=1e-6)


def test_softmax_invalid_axis():
    with pytest.raises(ValueError, match="axis"):
        T.softmax_stable(Tensor(np.ones((2, 2))), axis=2)


def test_log_softmax_matches_log_of_softmax(rng):
    x = Tensor(rng.normal(size=(3, 7)))
    np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax_stable(x).data), atol=1e-6)


def test_cross_entropy_uniform():
    loss = T.cross_entropy_logits(Tensor(np.zeros((1, 4))), [2])
    assert float(loss.data) == pytest.approx(np.log(4), abs=1e-6)


def test_cross_entropy_confident_correct():
    logits = np.zeros((1, 5), np.float32)
    logits[0, 3] = 1e4
    assert float(T.cross_entropy_logits(Tensor(logits), [3]).data) == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_ignored_position_contributes_nothing(rng):
    logits = rng.normal(size=(2, 6)).astype(np.float32)
    both = T.cross_entropy_logits(Tensor(logits), [4, 0], ignore_id=0)
    z = logits[0].astype(np.float64)
    manual = -(z[4] - np.log(np.exp(z).sum()))
    assert float(both.data) == pytest.approx(manual, abs=1e-6)


def test_cross_entropy_all_ignored_is_an_error():
    with pytest.raises(ValueError, match="empty loss"):
        T.cross_entropy_logits(Tensor(np.zeros((2, 4))), [0, 0])


def test_cross_entropy_out_of_range_target():
    with pytest.raises(ValueError, match="out of range"):
        T.cross_entropy_logits(Tensor(np.zeros((1, 4))), [4])


def test_cross_entropy_nonnegative(rng):
    for _ in range(50):
        logits = Tensor(rng.normal(scale=5, size=(3, 8)))
        t = rng.integers(1, 8, size=3)
        assert float(T.cross_entropy_logits(logits, t).data) >= 0


def test_bce_gradient_at_zero_logit():
    z = leaf([0.0])
    backward(T.bce_with_logits(z, [1.0]))
    assert z.grad[0] == pytest.approx(-0.5)


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    w = leaf([1.0, 2.0, 3.0])
    backward(T.tsum(w))
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_square():
    w = leaf([1.0, 2.0])
    backward(T.tsum(T.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2, 4])


def test_backward_disconnected_leaf_has_no_grad():
    w = leaf([1.0, 2.0])
    v = leaf([3.0])
    backward(T.tsum(v))
    assert w.grad is None


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        backward(T.mul(leaf([1.0, 2.0]), 2.0))


def test_frozen_leaf_gets_no_grad():
    w = leaf([1.0, 2.0])
    frozen = leaf([3.0, 4.0], grad=False)
    backward(T.tsum(T.mul(w, frozen)))
    np.testing.assert_array_equal(w.grad, [3, 4])
    assert frozen.grad is None


def test_fan_out_accumulates():
    w = leaf([2.0])
    y = T.add(T.mul(w, w), T.mul(w, 3.0))  # w^2 + 3w
    backward(T.tsum(y))
    assert w.grad[0] == pytest.approx(7.0)


def test_broadcast_gradients_are_reduced(rng):
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(1, 4)))
    backward(T.tsum(T.mul(a, b)))
    assert b.grad.shape == (1, 4)
    np.testing.assert_allclose(b.grad[0], a.data.sum(axis=0), rtol=1e-6)


def test_deep_chain_does_not_recurse():
    w = leaf([1.0])
    y = w
    for _ in range(5000):
        y = T.add(y, 0.0)
    backward(T.tsum(y))
    assert w.grad[0] == 1.0


def test_no_grad_records_nothing():
    w = leaf([1.0])
    with no_grad():
        y = T.mul(w, 2.0)
    assert not y.requires_grad


def test_scalar_results_stay_zero_dimensional():
    x = leaf(np.ones((2, 3)))
    assert T.getitem(x, (0, 1)).shape == ()
    assert Tensor(np.float32(1.0)).shape == ()


def test_float32_is_preserved(rng):
    x = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
    g = Tensor(np.ones(8, np.float32))
    b = Tensor(np.zeros(8, np.float32))
    for out in (T.gelu(x), T.layer_norm(x, g, b), T.softmax_stable(x), T.mul(x, 0.5)):
        assert out.dtype == np.float32


def test_layer_norm_normalises(rng):
    x = Tensor(rng.normal(3, 5, size=(5, 16)))
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=-1), 1, atol=1e-3)


def test_conv2d_matches_direct_correlation(rng):
    x = rng.normal(size=(2, 3, 7, 7)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(w), None, stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 4))
    for i in range(4):
        for j in range(4):
            patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_dropout_is_identity_at_p_zero(rng):
    from capdet.rng import Rng

    x = Tensor(rng.normal(size=(3, 3)))
    assert T.dropout(x, 0.0, Rng(0, "d")) is x


def test_dropout_keeps_expectation():
    from capdet.rng import Rng

    x = Tensor(np.ones((200, 200), np.float32))
    out = T.dropout(x, 0.25, Rng(0, "d")).data
    assert set(np.unique(out)) <= {0.0, np.float32(1 / 0.75)}
    assert out.mean() == pytest.approx(1.0, abs=0.02)


def test_gelu_reference():
    out = T.gelu(Tensor([-1.0, 0.0, 1.0, 3.0])).data
    # tanh approximation reference values
    np.testing.assert_allclose(out, [-0.158808, 0.0, 0.841192, 2.996363], atol=1e-5)


def test_ops_are_deterministic(rng):
    x = rng.normal(size=(4, 6)).astype(np.float32)
    run = lambda: T.layer_norm(T.gelu(Tensor(x)), Tensor(np.ones(6)), Tensor(np.zeros(6))).data.tobytes()
    assert run() == run()
