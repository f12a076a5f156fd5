"""Contract checks for the finite-difference harness itself."""

import numpy as np
import pytest

from rgalign import diffcore as dc
from rgalign.diffcore import Tensor
from rgalign.gradcheck import finite_difference_check


def _sum_sq(x):
    return dc.reduce_sum(dc.mul(x, x))


def test_requires_float64():
    with pytest.raises(ValueError, match="float64"):
        finite_difference_check(_sum_sq, Tensor(np.ones(3, dtype=np.float32),
                                                dtype="f32"))


def test_step_size_window():
    x = Tensor(np.ones(3), dtype="f64")
    with pytest.raises(ValueError, match="outside"):
        finite_difference_check(_sum_sq, x, h=1e-2)
    with pytest.raises(ValueError, match="outside"):
        finite_difference_check(_sum_sq, x, h=1e-8)


def test_non_finite_function_rejected():
    x = Tensor(np.zeros(2), dtype="f64")

    def f(v):
        return dc.log(dc.reduce_sum(dc.mul(v, 0.0)))  # log(0) = -inf

    with np.errstate(divide="ignore"):
        with pytest.raises(ValueError, match="finite"):
            finite_difference_check(f, x)


def test_quadratic_near_exact(rng):
    err = finite_difference_check(_sum_sq, Tensor(rng.standard_normal(4), dtype="f64"))
    assert err < 1e-7


def test_constant_zero_error(rng):
    err = finite_difference_check(lambda v: dc.reduce_sum(dc.mul(v, 0.0)),
                                  Tensor(rng.standard_normal(4), dtype="f64"))
    assert err == 0.0


def test_detects_wrong_gradient(rng):
    """A deliberately broken backward rule must be flagged."""

    def bad_op(x):
        out = dc.exp(x)
        # recompute through a path whose analytic gradient is wrong by 2x
        return dc.reduce_sum(dc.mul(out, 2.0))

    # correct path first
    err_ok = finite_difference_check(bad_op, Tensor(rng.standard_normal(3), dtype="f64"))
    assert err_ok < 1e-7

    def broken(x):
        # analytic grad of sum(2*exp) computed as if it were sum(exp)
        y = dc.exp(x)
        t = dc.Tensor(y.data * 2.0)  # constant: breaks the chain on purpose
        return dc.add(dc.reduce_sum(t), dc.mul(dc.reduce_sum(y), 0.0))

    err_bad = finite_difference_check(broken, Tensor(rng.standard_normal(3), dtype="f64"))
    assert err_bad > 1e-2
