"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .diffcore import Tape, Tensor, backward

__all__ = ["finite_difference_check"]


def finite_difference_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor. `x` must be float64 (finite
    differences at float32 have no headroom) and `h` must lie in
    [1e-6, 1e-4]. The error at each coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over coordinates
    is returned.
    """
    if not isinstance(x, Tensor):
        raise TypeError("finite_difference_check expects a Tensor input")
    if x.data.dtype != np.float64:
        raise ValueError("finite_difference_check requires float64 input")
    if not (1e-6 <= h <= 1e-4):
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")

    probe = Tensor(x.data.copy(), requires_grad=True, dtype="f64")
    with Tape() as tape:
        y = f(probe)
    y0 = y.item()
    if not np.isfinite(y0):
        raise ValueError(f"function value is not finite: {y0}")
    backward(tape, y)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        up = f(Tensor(bumped.reshape(x.shape), dtype="f64")).item()
        bumped[i] = flat[i] - h
        down = f(Tensor(bumped.reshape(x.shape), dtype="f64")).item()
        numeric[i] = (up - down) / (2.0 * h)

    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(rel.max()) if rel.size else 0.0
