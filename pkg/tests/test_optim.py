import numpy as np
import pytest

from capdet.optim import Adam, AdamState, adam_step
from capdet.tensor import ShapeError, Tensor, backward, tsum


def test_zero_grad_leaves_params():
    p = {"w": np.array([1.0, -2.0, 3.0], np.float32)}
    out = adam_step(p, {"w": np.zeros(3, np.float32)}, AdamState(), lr=0.1)
    assert np.array_equal(out["w"], p["w"])


def test_first_step_is_lr():
    state = AdamState()
    out = adam_step({"x": np.array(1.0, np.float32)}, {"x": np.array(1.0, np.float32)}, state, lr=0.1)
    assert out["x"] == pytest.approx(0.9, abs=1e-6)
    assert state.t == 1


def test_sign_not_magnitude_on_first_step():
    out = adam_step({"x": np.zeros(2, np.float32)}, {"x": np.array([1e-3, -50.0], np.float32)}, AdamState(), lr=0.01)
    assert np.allclose(out["x"], [-0.01, 0.01], atol=1e-6)


def test_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    x = rng.normal(size=4).astype(np.float32)
    grads = rng.normal(size=(6, 4)).astype(np.float32)
    state, cur = AdamState(), {"x": x}
    m = v = np.zeros(4)
    ref = x.astype(np.float64)
    for t, g in enumerate(grads, 1):
        cur = adam_step(cur, {"x": g}, state, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(cur["x"], ref, atol=1e-5)


def test_missing_grad_skips_param():
    p = {"a": np.ones(2, np.float32), "b": np.ones(2, np.float32)}
    out = adam_step(p, {"a": np.ones(2, np.float32), "b": None}, AdamState(), lr=0.1)
    assert out["b"] is p["b"]
    assert not np.array_equal(out["a"], p["a"])


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.ones(3, np.float32)}, {"w": np.ones(2, np.float32)}, AdamState(), lr=0.1)


def _trajectory():
    rng = np.random.default_rng(11)
    w = Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)
    opt = Adam({"w": w}, lr=0.01)
    snaps = []
    for _ in range(20):
        opt.zero_grad()
        backward(tsum(w * w))
        opt.step()
        snaps.append(w.data.copy())
    return np.stack(snaps)


def test_bit_identical_trajectories():
    assert _trajectory().tobytes() == _trajectory().tobytes()
