"""Neural-network building blocks as pure functions on tensors."""

from __future__ import annotations

import math

import numpy as np

from capsight.errors import DimensionError
from capsight.nn import tensor as T
from capsight.nn.tensor import Tensor


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last dimension: ``y = x @ w + b``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"linear: input width {x.shape[-1]} does not match weight rows {w.shape[0]} "
            f"(x{tuple(x.shape)} @ W{tuple(w.shape)})"
        )
    y = T.matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(
                f"linear: bias shape {tuple(b.shape)} does not match output width {w.shape[1]}"
            )
        y = T.add(y, b)
    return y


def normalize(x: Tensor, axis: int, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance standardization along ``axis``.

    Population variance (divide by n); eps added inside the square root.
    """
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"normalize: axis {axis} out of range for shape {tuple(x.shape)}")
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    return centered / T.sqrt(var + eps)


def layer_norm(x: Tensor, axis: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization along ``axis`` with affine parameters on that axis."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"layer_norm: axis {axis} out of range for shape {tuple(x.shape)}")
    size = x.shape[axis]
    if gamma.shape != (size,) or beta.shape != (size,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {tuple(gamma.shape)}/{tuple(beta.shape)} "
            f"do not match normalized axis size {size}"
        )
    bshape = [1] * x.ndim
    bshape[axis] = size
    xhat = normalize(x, axis, eps)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return T.softmax(x, axis=axis)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise feed-forward: rectified first projection, then second."""
    return linear(T.relu(linear(x, w1, b1)), w2, b2)


def causal_mask(t: int) -> np.ndarray:
    """Boolean [t, t] mask, True above the diagonal (future positions)."""
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scale: float,
    mask: np.ndarray | None = None,
    weights_sink: list | None = None,
) -> Tensor:
    """``softmax(q kᵀ / scale) v`` with optional boolean masking of key positions.

    Masked entries receive -inf before the softmax. When ``weights_sink`` is
    given, the attention probabilities are appended to it as a numpy array.
    """
    if scale <= 0:
        raise DimensionError(f"scaled_dot_attention: scale must be positive, got {scale}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"scaled_dot_attention: query width {q.shape[-1]} != key width {k.shape[-1]}"
        )
    if k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"scaled_dot_attention: key count {k.shape[0]} != value count {v.shape[0]}"
        )
    scores = T.matmul(q, k.T) * (1.0 / scale)
    if mask is not None:
        if mask.shape != scores.shape:
            raise DimensionError(
                f"scaled_dot_attention: mask shape {mask.shape} != score shape {tuple(scores.shape)}"
            )
        bias = np.where(mask, -math.inf, 0.0).astype(scores.dtype)
        scores = scores + Tensor(bias)
    probs = T.softmax(scores, axis=-1)
    if weights_sink is not None:
        weights_sink.append(probs.data.copy())
    return T.matmul(probs, v)
