"""The full captioner: aligned multi-level features -> gate -> refiner -> decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from capsight.backbone import GridFeatureSet, MultiLevelAligner
from capsight.data import decode_tokens
from capsight.decoder import CaptionDecoder, DecoderConfig, beam_search
from capsight.errors import ConfigError, DimensionError
from capsight.gate import ChannelGate
from capsight.nn.module import Linear, Module
from capsight.nn.tensor import Tensor, no_grad
from capsight.refiner import RefineConfig, RefinerStack


@dataclass
class ModelConfig:
    """Everything needed to rebuild a captioner deterministically."""

    vocab_size: int
    level_widths: list[int]
    positions: int
    d_model: int = 64
    heads: int = 2
    decoder_layers: int = 1
    d_ff: int | None = None
    refine_mode: str = "cascade"
    refine_layers: int = 1
    channel_heads: int = 1
    use_gate: bool = True
    gate_bottleneck: int | None = None
    learnable_squeeze: bool = False
    l_max: int = 16
    eps: float = 1e-5

    def __post_init__(self):
        if len(self.level_widths) < 1:
            raise ConfigError("at least one feature level is required")
        if self.positions < 1:
            raise ConfigError(f"position count must be >= 1, got {self.positions}")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


class Captioner(Module):
    """End-to-end model over precomputed grid-feature pyramids.

    With the gate enabled, all levels are aligned to the coarsest grid and
    channel-concatenated, gated, and fused down to the model width. Without
    it (the ablation baseline) only the last level is projected.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = np.random.default_rng(42) if rng is None else rng
        self.cfg = cfg
        if cfg.use_gate:
            self.aligner = MultiLevelAligner(cfg.level_widths, cfg.d_model, rng, dtype)
            channels = len(cfg.level_widths) * cfg.d_model
            self.gate = ChannelGate(
                channels,
                bottleneck=cfg.gate_bottleneck,
                eps=cfg.eps,
                rng=rng,
                dtype=dtype,
                learnable_squeeze=cfg.learnable_squeeze,
                positions=cfg.positions,
            )
            self.fuse = Linear(channels, cfg.d_model, rng, dtype)
        else:
            self.base_proj = Linear(cfg.level_widths[-1], cfg.d_model, rng, dtype)
        self.refiner = RefinerStack(
            RefineConfig(
                mode=cfg.refine_mode,
                layers=cfg.refine_layers,
                heads=cfg.heads,
                channel_heads=cfg.channel_heads,
                d_model=cfg.d_model,
                d_ff=cfg.d_ff,
                positions=cfg.positions,
                eps=cfg.eps,
            ),
            rng,
            dtype,
        )
        self.decoder = CaptionDecoder(
            DecoderConfig(
                vocab_size=cfg.vocab_size,
                d_model=cfg.d_model,
                heads=cfg.heads,
                layers=cfg.decoder_layers,
                d_ff=cfg.d_ff,
                l_max=cfg.l_max,
                eps=cfg.eps,
            ),
            rng,
            dtype,
        )
        self.finalize_names()

    def _levels_of(self, features) -> list:
        levels = features.levels if isinstance(features, GridFeatureSet) else list(features)
        if len(levels) != len(self.cfg.level_widths):
            raise DimensionError(
                f"model expects {len(self.cfg.level_widths)} feature levels, got {len(levels)}"
            )
        coarse = levels[-1].shape[0]
        if coarse != self.cfg.positions:
            raise DimensionError(
                f"model built for {self.cfg.positions} coarse positions, features have {coarse}"
            )
        return levels

    def encode(self, features, taps: dict | None = None) -> Tensor:
        """Encode a feature pyramid into the decoder memory [positions, d_model]."""
        levels = self._levels_of(features)
        if self.cfg.use_gate:
            aligned = self.aligner(levels)
            gated = self.gate(aligned, taps=taps)
            fused = self.fuse(gated)
        else:
            last = levels[-1]
            last = last if isinstance(last, Tensor) else Tensor(last)
            fused = self.base_proj(last)
        memory = self.refiner(fused, taps=taps)
        if taps is not None:
            taps["memory"] = memory.data.copy()
        return memory

    def caption_ids(self, features, beam: int = 2,
                    taps: dict | None = None) -> tuple[list[int], float]:
        """Decode one caption; returns token ids and the normalized log-probability."""
        with no_grad():
            memory = self.encode(features, taps=taps)
        ids, nbest = beam_search(self.decoder, memory, beam=beam)
        return ids, nbest[0][1]

    def caption_text(self, features, vocab, beam: int = 2) -> tuple[str, float]:
        ids, score = self.caption_ids(features, beam=beam)
        return " ".join(decode_tokens(ids, vocab)), score
