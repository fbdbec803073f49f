import numpy as np
import pytest

from dark import ops
from dark.gradcheck import TOLERANCE, check_gradients, relative_error
from dark.tensor import Tensor, high_precision, record


def _buggy_square(x):
    # forward x^2, backward claims 3x: the checker must notice
    return record("buggy", (x,), x.data**2, lambda g: (g * 3 * x.data,))


def test_checker_accepts_correct_and_flags_wrong_gradient():
    with high_precision():
        x = Tensor(np.random.default_rng(0).uniform(0.5, 1.5, (1, 2, 3, 3)), requires_grad=True)
        good = check_gradients(lambda: ops.reduce_sum(ops.square(x)), [x])
        bad = check_gradients(lambda: ops.reduce_sum(_buggy_square(x)), [x])
    assert good < 1e-7
    assert bad > TOLERANCE


def test_checker_requires_float64():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(TypeError, match="float64"):
        check_gradients(lambda: ops.reduce_sum(x), [x])


def test_relative_error_scale_free():
    a = np.array([1.0, 2.0])
    assert relative_error(a, a) == 0
    assert relative_error(1e6 * a, 1e6 * a * (1 + 1e-4)) == pytest.approx(1e-4, rel=1e-3)
    assert relative_error(np.zeros(2), np.full(2, 1e-12), floor=1e-6) < 1e-5
