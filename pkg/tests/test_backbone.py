"""Stub pyramid, OFT container, and multi-level alignment."""

import numpy as np
import pytest

from capsight import oft
from capsight.backbone import (GridFeatureSet, MultiLevelAligner, StubPyramidBackbone,
                               block_mean_to)
from capsight.errors import ConfigError, DataError, DimensionError, FormatError
from capsight.nn.tensor import Tensor


class TestStubBackbone:
    def test_position_counts_and_widths(self):
        backbone = StubPyramidBackbone(d0=16, rng=np.random.default_rng(0))
        levels = backbone(np.zeros((64, 64, 3), dtype=np.float32))
        assert [lv.shape for lv in levels] == [(256, 16), (64, 32), (16, 64), (16, 128)]

    def test_zero_image_zero_biases_gives_zero_features(self):
        backbone = StubPyramidBackbone(d0=8, rng=np.random.default_rng(1))
        levels = backbone(np.zeros((32, 32, 3), dtype=np.float32))
        for lv in levels:
            assert np.array_equal(lv.data, np.zeros_like(lv.data))

    def test_deterministic_given_seed(self):
        image = np.random.default_rng(5).normal(size=(32, 32, 3)).astype(np.float32)
        first = StubPyramidBackbone(d0=8, rng=np.random.default_rng(42))
        second = StubPyramidBackbone(d0=8, rng=np.random.default_rng(42))
        for a, b in zip(first(image), second(image)):
            assert np.array_equal(a.data, b.data)

    def test_indivisible_input_is_config_error(self):
        backbone = StubPyramidBackbone(d0=8, rng=np.random.default_rng(2))
        with pytest.raises(ConfigError, match="divisible"):
            backbone(np.zeros((30, 30, 3), dtype=np.float32))

    def test_grid_features_returns_validated_set(self):
        backbone = StubPyramidBackbone(d0=8, rng=np.random.default_rng(3))
        image = np.random.default_rng(6).normal(size=(32, 32, 3)).astype(np.float32)
        gfs = backbone.grid_features(image)
        assert isinstance(gfs, GridFeatureSet)
        assert gfs.coarse_positions == 4


class TestOftContainer:
    def make_levels(self, rng):
        return [rng.normal(size=(n, c)).astype(np.float32)
                for n, c in [(16, 5), (4, 6), (4, 7), (1, 8)]]

    def test_round_trip_is_bit_identical(self, tmp_path):
        levels = self.make_levels(np.random.default_rng(0))
        path = tmp_path / "f.oft"
        oft.save_features(path, levels)
        loaded = oft.load_features(path)
        for a, b in zip(levels, loaded):
            assert np.array_equal(a, b) and a.dtype == b.dtype

    def test_truncated_file_is_format_error(self, tmp_path):
        path = tmp_path / "f.oft"
        oft.save_features(path, self.make_levels(np.random.default_rng(1)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(FormatError, match="truncated"):
            oft.load_features(path)

    def test_three_levels_in_header_is_format_error(self, tmp_path):
        path = tmp_path / "f.oft"
        oft.save_features(path, self.make_levels(np.random.default_rng(2)))
        raw = bytearray(path.read_bytes())
        raw[4] = 3
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="expected 4 levels"):
            oft.load_features(path)

    def test_bad_magic_is_format_error(self, tmp_path):
        path = tmp_path / "f.oft"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            oft.load_features(path)

    def test_trailing_bytes_are_format_error(self, tmp_path):
        path = tmp_path / "f.oft"
        oft.save_features(path, self.make_levels(np.random.default_rng(3)))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            oft.load_features(path)


class TestGridFeatureSet:
    def test_requires_exactly_four_levels(self):
        with pytest.raises(DataError, match="4"):
            GridFeatureSet([np.zeros((4, 2))] * 3)

    def test_rejects_increasing_position_counts(self):
        with pytest.raises(DataError, match="non-increasing"):
            GridFeatureSet([np.zeros((4, 2)), np.zeros((16, 2)),
                            np.zeros((4, 2)), np.zeros((4, 2))])

    def test_rejects_non_finite(self):
        bad = np.zeros((4, 2), dtype=np.float32)
        bad[0, 0] = np.nan
        with pytest.raises(DataError, match="finite"):
            GridFeatureSet([np.zeros((4, 2))] * 3 + [bad])


class TestAligner:
    def test_identity_projection_concatenates_channels(self):
        rng = np.random.default_rng(0)
        aligner = MultiLevelAligner([3, 3], 3, rng)
        for proj in aligner.projections:
            proj.w.data = np.eye(3, dtype=np.float32)
            proj.b.data = np.zeros(3, dtype=np.float32)
        a = rng.normal(size=(4, 3)).astype(np.float32)
        b = rng.normal(size=(4, 3)).astype(np.float32)
        out = aligner([a, b]).data
        assert np.allclose(out, np.concatenate([a, b], axis=1), atol=1e-7)

    def test_constant_level_merges_to_same_value(self):
        rng = np.random.default_rng(1)
        aligner = MultiLevelAligner([2, 2], 2, rng)
        aligner.projections[0].w.data = np.eye(2, dtype=np.float32)
        aligner.projections[0].b.data = np.zeros(2, dtype=np.float32)
        fine = np.full((16, 2), 3.5, dtype=np.float32)
        coarse = rng.normal(size=(4, 2)).astype(np.float32)
        out = aligner([fine, coarse]).data
        assert np.allclose(out[:, :2], 3.5, atol=1e-6)

    def test_two_level_toy_hand_computed_block_means(self):
        # 2x2 grid merged into one cell: the mean of the four positions.
        rng = np.random.default_rng(2)
        aligner = MultiLevelAligner([2, 2], 2, rng)
        for proj in aligner.projections:
            proj.w.data = np.eye(2, dtype=np.float32)
            proj.b.data = np.zeros(2, dtype=np.float32)
        fine = np.array([[1, 2], [3, 4], [5, 6], [7, 8]], dtype=np.float32)
        coarse = np.array([[10, 20]], dtype=np.float32)
        out = aligner([fine, coarse]).data
        assert np.allclose(out, [[4.0, 5.0, 10.0, 20.0]])

    def test_output_width_is_levels_times_d_model(self):
        rng = np.random.default_rng(3)
        widths = [5, 6, 7, 8]
        aligner = MultiLevelAligner(widths, 4, rng)
        levels = [rng.normal(size=(n, c)).astype(np.float32)
                  for n, c in zip([16, 16, 4, 4], widths)]
        assert aligner(levels).shape == (4, 16)

    def test_channel_block_locality(self):
        # Channels [k*d, (k+1)*d) of the output depend only on level k.
        rng = np.random.default_rng(4)
        widths = [3, 4, 5, 6]
        aligner = MultiLevelAligner(widths, 4, rng)
        levels = [rng.normal(size=(4, c)).astype(np.float32) for c in widths]
        base = aligner(levels).data
        for k in range(4):
            bumped = [lv.copy() for lv in levels]
            bumped[k] += 1.0
            out = aligner(bumped).data
            for other in range(4):
                block = slice(other * 4, (other + 1) * 4)
                if other == k:
                    assert np.abs(out[:, block] - base[:, block]).max() > 1e-4
                else:
                    assert np.array_equal(out[:, block], base[:, block])

    def test_non_square_merge_is_config_error(self):
        rng = np.random.default_rng(5)
        aligner = MultiLevelAligner([2, 2], 2, rng)
        with pytest.raises(ConfigError, match="square"):
            aligner([np.zeros((6, 2), dtype=np.float32),
                     np.zeros((1, 2), dtype=np.float32)])

    def test_block_mean_preserves_equal_inputs_exactly(self):
        x = Tensor(np.full((64, 3), 1.25, dtype=np.float32))
        merged = block_mean_to(x, 4).data
        assert np.abs(merged - 1.25).max() < 1e-7
