import numpy as np
import pytest

from capdet import tensor as T
from capdet.gradcheck import NonDeterministicError, finite_diff_check
from capdet.tensor import Tensor

from kernels import KERNELS, cases

SEEDS = range(50)


@pytest.mark.parametrize("kernel", KERNELS)
def test_kernel_gradients_over_50_seeds(kernel):
    worst = 0.0
    for seed in SEEDS:
        for f, x in cases(seed)[kernel]:
            report = finite_diff_check(f, x, h=1e-3, tol=1e-4)
            worst = max(worst, report.max_rel_err)
            assert report.passed, f"{kernel} seed {seed}: max rel err {report.max_rel_err:.2e}"
    assert worst < 1e-4


def test_quadratic_passes():
    x = np.array([0.5, -1.5, 2.0], np.float32)
    report = finite_diff_check(lambda t: T.tsum(T.mul(t, t)), x, h=1e-3, tol=1e-4)
    assert report.passed
    np.testing.assert_allclose(report.analytic, 2 * x, rtol=1e-6)


def test_constant_function_passes_with_zero_error():
    report = finite_diff_check(lambda t: T.tsum(T.mul(t, 0.0)), np.ones(3, np.float32))
    assert report.max_rel_err == 0.0
    assert report.passed


def test_wrong_gradient_hook_fails():
    def bad_square(x):
        return Tensor.from_op(x.data * x.data, (x,), lambda g: (g * x.data,))  # missing factor 2

    report = finite_diff_check(lambda t: T.tsum(bad_square(t)), np.array([1.0, 2.0], np.float32))
    assert not report.passed


def test_nondeterministic_function_is_rejected():
    state = {"calls": 0}

    def f(t):
        state["calls"] += 1
        return T.tsum(T.mul(t, float(state["calls"])))

    with pytest.raises(NonDeterministicError):
        finite_diff_check(f, np.ones(2, np.float32))


def test_nonpositive_step_rejected():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: T.tsum(t), np.ones(2, np.float32), h=0.0)
