"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tensor, backward


def grad_check(fn, x, eps: float = 1e-5) -> float:
    """Max relative error between numeric and reverse-mode gradients of fn.

    ``fn`` maps one Tensor to a scalar Tensor and must be evaluated in
    float64. Central differences (f(x+eps) - f(x-eps)) / 2 eps are compared
    per coordinate against the tape gradient; the relative error denominator
    is max(1e-8, |analytic| + |numeric|).
    """
    x = np.asarray(x, dtype=np.float64)
    t = Tensor(x, requires_grad=True)
    loss = fn(t)
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(loss)
    analytic = t.grad.ravel().copy()

    flat = x.ravel().copy()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(fn(Tensor(flat.reshape(x.shape))).data)
        flat[i] = orig - eps
        f_minus = float(fn(Tensor(flat.reshape(x.shape))).data)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("non-finite values in gradient check")
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
