"""Non-local refining of the fused feature sequence in two axes.

The spatial block lets positions attend to each other with multi-head
attention; the channel block transposes the sequence so channels attend to
each other over their position profiles (projections act on the position
axis, scale is the square root of the sequence length). Branches combine
in parallel (both read the block input, outputs and input are summed) or
in cascade (channel refinement applied to the spatial output). Each layer
ends with a position-wise feed-forward sublayer.

Normalization follows the axis in which dependence was computed: spatial
blocks standardize along positions (affine kept per channel, preserving
permutation equivariance), channel blocks along channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from capsight.errors import ConfigError, DimensionError
from capsight.nn import functional as F
from capsight.nn import tensor as T
from capsight.nn.module import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from capsight.nn.tensor import Tensor

MODES = ("spatial", "channel", "parallel", "cascade", "none")


@dataclass
class RefineConfig:
    """Shape of the refiner stack."""

    mode: str = "cascade"
    layers: int = 1
    heads: int = 8
    channel_heads: int = 1
    d_model: int = 512
    d_ff: int | None = None
    positions: int | None = None
    eps: float = 1e-5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown refine mode {self.mode!r}, expected one of {MODES}")
        if self.layers < 0:
            raise ConfigError(f"refine layer count must be >= 0, got {self.layers}")
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ConfigError(f"model width {self.d_model} is not divisible by {self.heads} heads")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.mode in ("channel", "parallel", "cascade"):
            if self.positions is None:
                raise ConfigError(f"mode {self.mode!r} needs the sequence position count")
            if self.channel_heads < 1 or self.positions % self.channel_heads != 0:
                raise ConfigError(
                    f"position count {self.positions} is not divisible by "
                    f"{self.channel_heads} channel heads"
                )


class SpatialRefiner(Module):
    """Position-to-position attention, normalized along positions, plus skip."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator,
                 eps: float = 1e-5, dtype=np.float32):
        self.attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.norm = LayerNorm(d_model, axis=0, eps=eps, affine_axis=1, dtype=dtype)

    def __call__(self, x: Tensor, weights_sink: list | None = None) -> Tensor:
        refined = self.attn(x, x, weights_sink=weights_sink)
        return self.norm(refined) + x


class ChannelRefiner(Module):
    """Channel-to-channel attention over position profiles, plus skip.

    The sequence is transposed to [channels, positions]; projections map the
    position axis, heads (default one) split it, and scores are scaled by the
    square root of the per-head profile length. The output is normalized
    along channels before the residual.
    """

    def __init__(self, positions: int, d_model: int, rng: np.random.Generator,
                 heads: int = 1, eps: float = 1e-5, dtype=np.float32):
        if heads < 1 or positions % heads != 0:
            raise ConfigError(f"position count {positions} is not divisible by {heads} heads")
        self.wq = Linear(positions, positions, rng, dtype)
        self.wk = Linear(positions, positions, rng, dtype)
        self.wv = Linear(positions, positions, rng, dtype)
        self.wo = Linear(positions, positions, rng, dtype)
        self.norm = LayerNorm(d_model, axis=-1, eps=eps, dtype=dtype)
        self.positions = positions
        self.heads = heads

    def __call__(self, x: Tensor, weights_sink: list | None = None) -> Tensor:
        if x.shape[0] != self.positions:
            raise DimensionError(
                f"channel refiner built for {self.positions} positions, got {x.shape[0]}"
            )
        xt = x.T
        q = self.wq(xt)
        k = self.wk(xt)
        v = self.wv(xt)
        width = self.positions // self.heads
        scale = math.sqrt(width)
        outs = []
        for h in range(self.heads):
            cols = slice(h * width, (h + 1) * width)
            outs.append(
                F.scaled_dot_attention(q[:, cols], k[:, cols], v[:, cols], scale,
                                       weights_sink=weights_sink)
            )
        merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)
        refined = self.wo(merged).T
        return self.norm(refined) + x


class ParallelRefiner(Module):
    """Both branches read the layer input; outputs and input are summed."""

    def __init__(self, cfg: RefineConfig, rng: np.random.Generator, dtype=np.float32):
        self.spatial = SpatialRefiner(cfg.d_model, cfg.heads, rng, cfg.eps, dtype)
        self.channel = ChannelRefiner(cfg.positions, cfg.d_model, rng,
                                      cfg.channel_heads, cfg.eps, dtype)

    def __call__(self, x: Tensor, spatial_sink=None, channel_sink=None) -> Tensor:
        return self.spatial(x, spatial_sink) + self.channel(x, channel_sink) + x


class CascadeRefiner(Module):
    """Channel refinement applied on top of the spatial output."""

    def __init__(self, cfg: RefineConfig, rng: np.random.Generator, dtype=np.float32):
        self.spatial = SpatialRefiner(cfg.d_model, cfg.heads, rng, cfg.eps, dtype)
        self.channel = ChannelRefiner(cfg.positions, cfg.d_model, rng,
                                      cfg.channel_heads, cfg.eps, dtype)

    def __call__(self, x: Tensor, spatial_sink=None, channel_sink=None) -> Tensor:
        return self.channel(self.spatial(x, spatial_sink), channel_sink)


class RefineLayer(Module):
    """One refining block followed by a feed-forward sublayer with skip."""

    def __init__(self, cfg: RefineConfig, rng: np.random.Generator, dtype=np.float32):
        if cfg.mode == "spatial":
            self.block = SpatialRefiner(cfg.d_model, cfg.heads, rng, cfg.eps, dtype)
        elif cfg.mode == "channel":
            self.block = ChannelRefiner(cfg.positions, cfg.d_model, rng,
                                        cfg.channel_heads, cfg.eps, dtype)
        elif cfg.mode == "parallel":
            self.block = ParallelRefiner(cfg, rng, dtype)
        elif cfg.mode == "cascade":
            self.block = CascadeRefiner(cfg, rng, dtype)
        else:
            raise ConfigError(f"refine layer cannot be built for mode {cfg.mode!r}")
        self.mode = cfg.mode
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, dtype)
        self.ffn_norm = LayerNorm(cfg.d_model, axis=-1, eps=cfg.eps, dtype=dtype)

    def __call__(self, x: Tensor, taps: dict | None = None, tag: str = "") -> Tensor:
        sinks = {"spatial": [], "channel": []} if taps is not None else None
        if self.mode == "spatial":
            y = self.block(x, sinks["spatial"] if sinks else None)
        elif self.mode == "channel":
            y = self.block(x, sinks["channel"] if sinks else None)
        else:
            y = self.block(x,
                           sinks["spatial"] if sinks else None,
                           sinks["channel"] if sinks else None)
        if taps is not None:
            for branch, maps in sinks.items():
                for i, attn in enumerate(maps):
                    taps[f"{tag}.{branch}.head{i}"] = attn
        return self.ffn_norm(self.ffn(y)) + y


class RefinerStack(Module):
    """N refine layers; mode "none" or N=0 is the exact identity."""

    def __init__(self, cfg: RefineConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = np.random.default_rng(42) if rng is None else rng
        self.cfg = cfg
        if cfg.mode == "none" or cfg.layers == 0:
            self.layers = []
        else:
            self.layers = [RefineLayer(cfg, rng, dtype) for _ in range(cfg.layers)]

    def __call__(self, x: Tensor, taps: dict | None = None) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x, taps=taps, tag=f"refine{i}")
        return x
