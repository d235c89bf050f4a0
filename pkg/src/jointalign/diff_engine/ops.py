"""Network-level operations composed from the primitive tape ops."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _as_tensor,
    abs_,
    clip,
    layer_norm_fused,
    linear_fused,
    log,
    matmul,
    softmax,
    swapaxes,
)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: x @ w (+ b). w has shape [in, out]."""
    return linear_fused(x, w, b)


def layer_norm(x: Tensor, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    return layer_norm_fused(x, gamma, beta, eps)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention softmax(q kT / sqrt(d_k)) v.

    Works over arbitrary leading batch dims (multi-head = one batched call).
    The 1/sqrt(d_k) scale is folded into the queries before the score
    matmul (mathematically identical, cheaper on wide score matrices).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value count mismatch: {k.shape} vs {v.shape}")
    scores = matmul(q * (1.0 / math.sqrt(q.shape[-1])), swapaxes(k, -1, -2))
    return matmul(softmax(scores, axis=-1), v)


def l1_loss(pred: Tensor, target, reduction: str = "sum") -> Tensor:
    """Sum (or mean) of absolute deviations."""
    diff = abs_(pred - _as_tensor(target, np.asarray(pred.data).dtype))
    return diff.sum() if reduction == "sum" else diff.mean()


def bce_loss(sigma: Tensor, labels, reduction: str = "sum",
             eps: float = 1e-7) -> Tensor:
    """Binary cross entropy on probabilities, clamped to [eps, 1-eps]."""
    labels = _as_tensor(labels, np.asarray(sigma.data).dtype)
    s = clip(sigma, eps, 1.0 - eps)
    per = -(labels * log(s) + (1.0 - labels) * log(1.0 - s))
    return per.sum() if reduction == "sum" else per.mean()
