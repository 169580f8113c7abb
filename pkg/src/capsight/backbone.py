"""Multi-level grid features: the stub pyramid, validation, and alignment.

The stub backbone stands in for a real hierarchical vision encoder. It
produces four feature levels from an image via strided linear patch maps
(downsample x4, x2, x2, then a width-doubling stage that keeps resolution),
so level widths follow d0 * {1, 2, 4, 8}.

The aligner projects each level to the model width and block-averages it
down to the coarsest grid before concatenating along channels, one channel
block per level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from capsight import oft
from capsight.errors import ConfigError, DataError, DimensionError
from capsight.nn import functional as F
from capsight.nn import tensor as T
from capsight.nn.module import Linear, Module
from capsight.nn.tensor import Tensor, no_grad


def _square_side(positions: int, what: str) -> int:
    side = math.isqrt(positions)
    if side * side != positions:
        raise ConfigError(f"{what}: position count {positions} is not a square grid")
    return side


@dataclass
class GridFeatureSet:
    """Four feature levels, each [positions, channels], finest first."""

    levels: list[np.ndarray]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise DataError(f"expected 4 feature levels, got {len(self.levels)}")
        self.levels = [np.asarray(level, dtype=np.float32) for level in self.levels]
        for i, level in enumerate(self.levels):
            if level.ndim != 2 or level.shape[0] < 1 or level.shape[1] < 1:
                raise DataError(f"level {i} must be a non-empty [positions, channels] array")
            if not np.all(np.isfinite(level)):
                raise DataError(f"level {i} contains non-finite values")
        counts = [level.shape[0] for level in self.levels]
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise DataError(f"level position counts must be non-increasing, got {counts}")

    @property
    def channel_widths(self) -> list[int]:
        return [level.shape[1] for level in self.levels]

    @property
    def coarse_positions(self) -> int:
        return self.levels[-1].shape[0]

    def save(self, path) -> None:
        oft.save_features(path, self.levels)

    @classmethod
    def load(cls, path) -> "GridFeatureSet":
        return cls(oft.load_features(path))


class StubPyramidBackbone(Module):
    """Trainable stand-in pyramid over raw [h, w, 3] images.

    Stage strides are (4, 2, 2, 1) with widths d0 * (1, 2, 4, 8); rectifiers
    sit between stages. Square inputs with sides divisible by 16 only.
    """

    STRIDES = (4, 2, 2, 1)

    def __init__(self, d0: int = 16, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng(42) if rng is None else rng
        self.d0 = d0
        widths = [d0, 2 * d0, 4 * d0, 8 * d0]
        in_widths = [3] + widths[:-1]
        self.stages = [
            Linear(stride * stride * c_in, c_out, rng, dtype)
            for stride, c_in, c_out in zip(self.STRIDES, in_widths, widths)
        ]

    def __call__(self, image) -> list[Tensor]:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
        if x.ndim != 3 or x.shape[2] != 3:
            raise ConfigError(f"stub backbone expects [h, w, 3] input, got {tuple(x.shape)}")
        h, w = x.shape[0], x.shape[1]
        if h != w:
            raise ConfigError(f"stub backbone expects a square input, got {h}x{w}")
        if h % 16 != 0:
            raise ConfigError(f"input side {h} is not divisible by 16")
        levels = []
        side = h
        for i, (stride, stage) in enumerate(zip(self.STRIDES, self.stages)):
            side //= stride
            c_in = x.shape[-1]
            patches = x.reshape(side, stride, side, stride, c_in)
            patches = T.permute(patches, (0, 2, 1, 3, 4))
            patches = patches.reshape(side * side, stride * stride * c_in)
            x = stage(patches)
            if i + 1 < len(self.stages):
                x = T.relu(x)
            levels.append(x)
            x = x.reshape(side, side, x.shape[-1])
        return levels

    def grid_features(self, image) -> GridFeatureSet:
        """Inference helper: run the pyramid without building a graph."""
        with no_grad():
            levels = self(image)
        return GridFeatureSet([level.data for level in levels])


def block_mean_to(x: Tensor, target_positions: int) -> Tensor:
    """Average non-overlapping square blocks of a flattened square grid.

    Folds an [n, c] level (n = s*s positions, row-major) down to
    ``target_positions`` coarse cells, each the mean of the square block of
    fine positions that maps onto it.
    """
    n, c = x.shape
    if n == target_positions:
        return x
    side = _square_side(n, "patch merge")
    coarse = _square_side(target_positions, "patch merge")
    if side % coarse != 0:
        raise ConfigError(
            f"patch merge: fine side {side} is not a multiple of coarse side {coarse}"
        )
    r = side // coarse
    grid = x.reshape(coarse, r, coarse, r, c)
    return grid.sum(axis=(1, 3)).reshape(target_positions, c) * (1.0 / (r * r))


class MultiLevelAligner(Module):
    """Project each level to the model width, merge to the coarsest grid,
    and concatenate along channels (one d_model-wide block per level)."""

    def __init__(self, level_widths: list[int], d_model: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.projections = [Linear(width, d_model, rng, dtype) for width in level_widths]
        self.level_widths = list(level_widths)
        self.d_model = d_model

    def __call__(self, levels: list) -> Tensor:
        if len(levels) != len(self.projections):
            raise DimensionError(
                f"aligner built for {len(self.projections)} levels, got {len(levels)}"
            )
        tensors = [lv if isinstance(lv, Tensor) else Tensor(lv) for lv in levels]
        for i, (lv, width) in enumerate(zip(tensors, self.level_widths)):
            if lv.shape[1] != width:
                raise DimensionError(
                    f"level {i} has {lv.shape[1]} channels, aligner expects {width}"
                )
        coarse = tensors[-1].shape[0]
        merged = [block_mean_to(proj(lv), coarse) for proj, lv in zip(self.projections, tensors)]
        return merged[0] if len(merged) == 1 else T.concat(merged, axis=-1)
