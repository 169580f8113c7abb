"""Parameter containers and the standard layers built from them."""

from __future__ import annotations

import math

import numpy as np

from capsight.errors import ConfigError
from capsight.nn import functional as F
from capsight.nn import tensor as T
from capsight.nn.tensor import Parameter, Tensor


class Module:
    """Minimal parameter registry. Submodules and parameters are discovered
    from instance attributes (lists of modules included), in definition order.
    """

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path)
            elif isinstance(value, (list, tuple)):
                for i, entry in enumerate(value):
                    if isinstance(entry, Module):
                        yield from entry.named_parameters(f"{path}.{i}")
                    elif isinstance(entry, Parameter):
                        yield f"{path}.{i}", entry

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def finalize_names(self, prefix: str = "") -> None:
        """Stamp hierarchical names onto parameters (checkpointing, diagnostics)."""
        for name, param in self.named_parameters(prefix):
            param.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.w = Parameter(xavier_uniform(rng, in_dim, out_dim, dtype))
        self.b = Parameter(np.zeros(out_dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.w, self.b)


class LayerNorm(Module):
    """Layer normalization along ``axis`` with learnable scale and shift.

    ``affine_axis`` may differ from the normalized axis; the refiner's
    position-wise normalization keeps its affine parameters per channel so
    that the block stays equivariant under position permutations.
    """

    def __init__(self, size: int, axis: int = -1, eps: float = 1e-5,
                 affine_axis: int | None = None, dtype=np.float32):
        self.gamma = Parameter(np.ones(size, dtype=dtype))
        self.beta = Parameter(np.zeros(size, dtype=dtype))
        self.axis = axis
        self.affine_axis = axis if affine_axis is None else affine_axis
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        if self.affine_axis == self.axis:
            return F.layer_norm(x, self.axis, self.gamma, self.beta, self.eps)
        bshape = [1] * x.ndim
        bshape[self.affine_axis] = self.gamma.shape[0]
        xhat = F.normalize(x, self.axis, self.eps)
        return xhat * self.gamma.reshape(bshape) + self.beta.reshape(bshape)


class FeedForward(Module):
    """Two-layer position-wise network with a rectifier in between."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float32):
        self.w1 = Parameter(xavier_uniform(rng, d_model, d_ff, dtype))
        self.b1 = Parameter(np.zeros(d_ff, dtype=dtype))
        self.w2 = Parameter(xavier_uniform(rng, d_ff, d_model, dtype))
        self.b2 = Parameter(np.zeros(d_model, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return F.ffn(x, self.w1, self.b1, self.w2, self.b2)


class MultiHeadAttention(Module):
    """Standard multi-head attention over sequence positions.

    Queries/keys/values are projected with width-preserving maps, split into
    ``heads`` slices, attended per head with scale sqrt(d_v), concatenated
    and passed through the output projection.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if heads < 1 or d_model % heads != 0:
            raise ConfigError(f"model width {d_model} is not divisible by head count {heads}")
        self.wq = Linear(d_model, d_model, rng, dtype)
        self.wk = Linear(d_model, d_model, rng, dtype)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)
        self.heads = heads
        self.d_model = d_model

    def __call__(
        self,
        x_q: Tensor,
        x_kv: Tensor,
        mask: np.ndarray | None = None,
        weights_sink: list | None = None,
    ) -> Tensor:
        q = self.wq(x_q)
        k = self.wk(x_kv)
        v = self.wv(x_kv)
        d_v = self.d_model // self.heads
        scale = math.sqrt(d_v)
        outs = []
        for h in range(self.heads):
            cols = slice(h * d_v, (h + 1) * d_v)
            outs.append(
                F.scaled_dot_attention(q[:, cols], k[:, cols], v[:, cols], scale,
                                       mask=mask, weights_sink=weights_sink)
            )
        merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)
        return self.wo(merged)
