import numpy as np
import pytest

from segstitch import tensor as T
from segstitch.gradcheck import (FLOOR, GradCheckResult, check_directional, check_gradients, format_results,
                                 relative_error, run_suite)
from segstitch.tensor import Tensor, _make


def test_every_operation_passes():
    results = run_suite(0, include_model=False)
    assert len(results) > 40
    bad = [(r.name, r.error) for r in results if not r.passed]
    assert not bad
    assert "ok" in format_results(results)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5
    assert FLOOR == 1e-8


def wrong_square(x):
    # forward x^2 with a deliberately wrong backward (1.9 x)
    return _make(x.data ** 2, (x,), lambda g: (1.9 * x.data * g,), "bad_square")


def test_detects_wrong_gradient():
    with T.precision("f64"):
        x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
        assert check_gradients(lambda x: T.sum(wrong_square(x)), [x]) > 1e-2
        assert check_directional(lambda: T.sum(wrong_square(x)), [x]) > 1e-2
        assert check_gradients(lambda x: T.sum(T.square(x)), [x]) < 1e-8


def test_result_pass_flag():
    assert GradCheckResult("a", 5e-5, 0.0).passed
    assert not GradCheckResult("a", 2e-4, 0.0).passed
    assert not GradCheckResult("a", float("nan"), 0.0).passed
