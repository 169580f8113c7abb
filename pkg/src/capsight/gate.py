"""Channel gating over concatenated multi-level features.

Each channel of the aligned feature tensor is squeezed to one
representative value (average pooling over positions), excited through a
two-layer bottleneck into a (0, 1) coefficient, and used to rescale its
channel. The gated tensor is layer-normalized over channels and added back
onto the input.
"""

from __future__ import annotations

import numpy as np

from capsight.errors import ConfigError, DimensionError
from capsight.nn import functional as F
from capsight.nn import tensor as T
from capsight.nn.module import LayerNorm, Linear, Module
from capsight.nn.tensor import Tensor


class ChannelGate(Module):
    """Squeeze-excite gate plus post-gate normalization and residual.

    ``bottleneck`` defaults to a quarter of the channel count. With
    ``learnable_squeeze`` the per-channel representative value comes from a
    trained projection over positions instead of the mean; that variant pins
    the gate to a fixed position count.
    """

    def __init__(self, channels: int, bottleneck: int | None = None, eps: float = 1e-5,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 learnable_squeeze: bool = False, positions: int | None = None):
        rng = np.random.default_rng(42) if rng is None else rng
        if bottleneck is None:
            bottleneck = max(channels // 4, 1)
        if bottleneck < 1:
            raise ConfigError(f"gate bottleneck must be >= 1, got {bottleneck}")
        self.channels = channels
        self.down = Linear(channels, bottleneck, rng, dtype)
        self.up = Linear(bottleneck, channels, rng, dtype)
        self.norm = LayerNorm(channels, axis=-1, eps=eps, dtype=dtype)
        self.learnable_squeeze = bool(learnable_squeeze)
        if self.learnable_squeeze:
            if positions is None:
                raise ConfigError("learnable squeeze needs the position count up front")
            self.squeeze_proj = Linear(positions, 1, rng, dtype)

    def squeeze(self, m: Tensor) -> Tensor:
        """One representative value per channel, shape [channels]."""
        if m.ndim != 2 or m.shape[0] < 1:
            raise DimensionError(f"squeeze expects a non-empty [positions, channels] tensor, got {tuple(m.shape)}")
        if m.shape[1] != self.channels:
            raise DimensionError(f"gate built for {self.channels} channels, got {m.shape[1]}")
        if self.learnable_squeeze:
            return self.squeeze_proj(m.T).reshape(self.channels)
        return m.mean(axis=0)

    def excite(self, squeezed: Tensor) -> Tensor:
        """Bottleneck the squeezed vector into per-channel coefficients in (0, 1)."""
        return T.sigmoid(self.up(T.relu(self.down(squeezed))))

    def coefficients(self, m: Tensor) -> Tensor:
        return self.excite(self.squeeze(m))

    def __call__(self, m: Tensor, taps: dict | None = None) -> Tensor:
        gate = self.coefficients(m)
        gated = m * gate
        out = self.norm(gated) + m
        if taps is not None:
            taps["gate_coefficients"] = gate.data.copy()
            taps["gate_input"] = m.data.copy()
            taps["gate_output"] = out.data.copy()
        return out
