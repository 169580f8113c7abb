"""Dual-axis non-local refining: blocks, combinations, stack, invariants."""

import numpy as np
import pytest

import oracles
from capsight.errors import ConfigError
from capsight.nn.gradcheck import build_safe_case, grad_check
from capsight.nn.tensor import Tensor
from capsight.refiner import (CascadeRefiner, ChannelRefiner, ParallelRefiner,
                              RefineConfig, RefineLayer, RefinerStack, SpatialRefiner)


def spatial_params(block):
    return {
        "wq": block.attn.wq.w.data.tolist(), "bq": block.attn.wq.b.data.tolist(),
        "wk": block.attn.wk.w.data.tolist(), "bk": block.attn.wk.b.data.tolist(),
        "wv": block.attn.wv.w.data.tolist(), "bv": block.attn.wv.b.data.tolist(),
        "wo": block.attn.wo.w.data.tolist(), "bo": block.attn.wo.b.data.tolist(),
        "gamma": block.norm.gamma.data.tolist(), "beta": block.norm.beta.data.tolist(),
    }


def channel_params(block):
    return {
        "wq": block.wq.w.data.tolist(), "bq": block.wq.b.data.tolist(),
        "wk": block.wk.w.data.tolist(), "bk": block.wk.b.data.tolist(),
        "wv": block.wv.w.data.tolist(), "bv": block.wv.b.data.tolist(),
        "wo": block.wo.w.data.tolist(), "bo": block.wo.b.data.tolist(),
        "gamma": block.norm.gamma.data.tolist(), "beta": block.norm.beta.data.tolist(),
    }


class TestSpatialRefiner:
    def test_single_position_with_zero_output_projection_is_identity(self):
        block = SpatialRefiner(4, 2, np.random.default_rng(0))
        block.attn.wo.w.data[:] = 0
        block.attn.wo.b.data[:] = 0
        x = np.random.default_rng(1).normal(size=(1, 4)).astype(np.float32)
        out = block(Tensor(x)).data
        assert np.allclose(out, x, atol=1e-6)

    def test_zero_query_key_projections_give_uniform_attention(self):
        rng = np.random.default_rng(2)
        block = SpatialRefiner(4, 1, rng)
        block.attn.wq.w.data[:] = 0
        block.attn.wq.b.data[:] = 0
        block.attn.wk.w.data[:] = 0
        block.attn.wk.b.data[:] = 0
        x = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
        sink = []
        block(x, weights_sink=sink)
        assert np.allclose(sink[0], 1.0 / 5.0, atol=1e-7)

    def test_scalar_loop_oracle_eq4_spatial(self):
        # 64-bit block: the position-axis norm amplifies 32-bit roundoff past
        # 1e-6, so the structural agreement is checked without that noise.
        rng = np.random.default_rng(3)
        block = SpatialRefiner(4, 2, np.random.default_rng(4), dtype=np.float64)
        params = spatial_params(block)
        for _ in range(100):
            x = rng.normal(size=(3, 4)).astype(np.float32)
            got = block(Tensor(x.astype(np.float64))).data
            want = oracles.loop_spatial_block(x.tolist(), 2, params)
            assert np.abs(got - np.array(want)).max() < 1e-6

    def test_float32_path_matches_to_roundoff(self):
        rng = np.random.default_rng(40)
        block64 = SpatialRefiner(4, 2, np.random.default_rng(41), dtype=np.float64)
        block32 = SpatialRefiner(4, 2, np.random.default_rng(41), dtype=np.float32)
        x = rng.normal(size=(3, 4)).astype(np.float32)
        got32 = block32(Tensor(x)).data
        got64 = block64(Tensor(x.astype(np.float64))).data
        assert np.abs(got32 - got64).max() < 1e-4

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            block = SpatialRefiner(8, 2, np.random.default_rng(100 + trial))
            x = rng.normal(size=(7, 8)).astype(np.float32)
            perm = rng.permutation(7)
            direct = block(Tensor(x[perm])).data
            permuted = block(Tensor(x)).data[perm]
            assert np.abs(direct - permuted).max() < 1e-5


class TestChannelRefiner:
    def test_single_channel_with_zero_output_projection_is_identity(self):
        block = ChannelRefiner(positions=3, d_model=1, rng=np.random.default_rng(6))
        block.wo.w.data[:] = 0
        block.wo.b.data[:] = 0
        x = np.random.default_rng(7).normal(size=(3, 1)).astype(np.float32)
        out = block(Tensor(x)).data
        assert np.allclose(out, x, atol=1e-6)

    def test_identical_channels_refine_identically(self):
        block = ChannelRefiner(positions=4, d_model=3, rng=np.random.default_rng(8))
        rng = np.random.default_rng(9)
        col = rng.normal(size=4).astype(np.float32)
        x = np.stack([col, rng.normal(size=4).astype(np.float32), col], axis=1)
        out = block(Tensor(x)).data
        assert np.allclose(out[:, 0], out[:, 2], atol=1e-6)

    def test_scalar_loop_oracle_eq4_channel(self):
        rng = np.random.default_rng(10)
        block = ChannelRefiner(positions=3, d_model=4, rng=np.random.default_rng(11),
                               dtype=np.float64)
        params = channel_params(block)
        for _ in range(100):
            x = rng.normal(size=(3, 4)).astype(np.float32)
            got = block(Tensor(x.astype(np.float64))).data
            want = oracles.loop_channel_block(x.tolist(), params)
            assert np.abs(got - np.array(want)).max() < 1e-6

    def test_channel_permutation_equivariance(self):
        # Permuting channels, with the per-channel norm parameters permuted
        # to match, permutes the output identically. The projections act on
        # the position axis, so they carry no channel-indexed parameters.
        rng = np.random.default_rng(12)
        for trial in range(10):
            block = ChannelRefiner(positions=4, d_model=6,
                                   rng=np.random.default_rng(200 + trial))
            block.norm.gamma.data = rng.normal(1, 0.3, size=6).astype(np.float32)
            block.norm.beta.data = rng.normal(0, 0.3, size=6).astype(np.float32)
            x = rng.normal(size=(4, 6)).astype(np.float32)
            perm = rng.permutation(6)
            base = block(Tensor(x)).data
            block.norm.gamma.data = block.norm.gamma.data[perm]
            block.norm.beta.data = block.norm.beta.data[perm]
            direct = block(Tensor(x[:, perm])).data
            assert np.abs(direct - base[:, perm]).max() < 1e-5


class TestParallel:
    def test_scalar_loop_oracle_eq5(self):
        rng = np.random.default_rng(13)
        cfg = RefineConfig(mode="parallel", layers=1, heads=2, d_model=4,
                           d_ff=8, positions=3)
        block = ParallelRefiner(cfg, np.random.default_rng(14), np.float64)
        sp = spatial_params(block.spatial)
        ch = channel_params(block.channel)
        for _ in range(100):
            x = rng.normal(size=(3, 4)).astype(np.float32)
            got = block(Tensor(x.astype(np.float64))).data
            want = oracles.loop_parallel_block(x.tolist(), 2, sp, ch)
            assert np.abs(got - np.array(want)).max() < 1e-6

    def test_zero_input_zero_biases_reduces_to_norm_offsets(self):
        cfg = RefineConfig(mode="parallel", layers=1, heads=1, d_model=3,
                           d_ff=6, positions=2)
        block = ParallelRefiner(cfg, np.random.default_rng(15))
        x = np.zeros((2, 3), dtype=np.float32)
        got = block(Tensor(x)).data
        want = oracles.loop_parallel_block(
            x.tolist(), 1, spatial_params(block.spatial), channel_params(block.channel))
        assert np.abs(got - np.array(want)).max() < 1e-6

    def test_shape_preserved(self):
        cfg = RefineConfig(mode="parallel", layers=1, heads=2, d_model=16,
                           d_ff=16, positions=7, channel_heads=1)
        block = ParallelRefiner(cfg, np.random.default_rng(16))
        x = Tensor(np.random.default_rng(17).normal(size=(7, 16)).astype(np.float32))
        assert block(x).shape == (7, 16)


class TestCascade:
    def test_zero_output_projections_collapse_to_input(self):
        cfg = RefineConfig(mode="cascade", layers=1, heads=2, d_model=4,
                           d_ff=8, positions=3)
        block = CascadeRefiner(cfg, np.random.default_rng(18))
        block.spatial.attn.wo.w.data[:] = 0
        block.spatial.attn.wo.b.data[:] = 0
        block.channel.wo.w.data[:] = 0
        block.channel.wo.b.data[:] = 0
        x = np.random.default_rng(19).normal(size=(3, 4)).astype(np.float32)
        out = block(Tensor(x)).data
        assert np.allclose(out, x, atol=1e-6)

    def test_scalar_loop_oracle_eq6(self):
        rng = np.random.default_rng(20)
        cfg = RefineConfig(mode="cascade", layers=1, heads=1, d_model=2,
                           d_ff=4, positions=1)
        block = CascadeRefiner(cfg, np.random.default_rng(21), np.float64)
        sp = spatial_params(block.spatial)
        ch = channel_params(block.channel)
        for _ in range(100):
            x = rng.normal(size=(1, 2)).astype(np.float32)
            got = block(Tensor(x.astype(np.float64))).data
            want = oracles.loop_cascade_block(x.tolist(), 1, sp, ch)
            assert np.abs(got - np.array(want)).max() < 1e-6

    def test_scalar_loop_oracle_eq6_multi_position(self):
        rng = np.random.default_rng(50)
        cfg = RefineConfig(mode="cascade", layers=1, heads=2, d_model=4,
                           d_ff=8, positions=3)
        block = CascadeRefiner(cfg, np.random.default_rng(51), np.float64)
        sp = spatial_params(block.spatial)
        ch = channel_params(block.channel)
        for _ in range(100):
            x = rng.normal(size=(3, 4)).astype(np.float32)
            got = block(Tensor(x.astype(np.float64))).data
            want = oracles.loop_cascade_block(x.tolist(), 2, sp, ch)
            assert np.abs(got - np.array(want)).max() < 1e-6

    def test_equals_channel_of_spatial_with_tied_parameters(self):
        cfg = RefineConfig(mode="cascade", layers=1, heads=2, d_model=6,
                           d_ff=8, positions=4)
        block = CascadeRefiner(cfg, np.random.default_rng(22))
        x = Tensor(np.random.default_rng(23).normal(size=(4, 6)).astype(np.float32))
        got = block(x).data
        want = block.channel(block.spatial(x)).data
        assert np.array_equal(got, want)


class TestStack:
    def test_zero_layers_is_bit_exact_identity(self):
        for mode in ("spatial", "cascade", "none"):
            cfg = RefineConfig(mode=mode, layers=0, heads=2, d_model=6,
                               d_ff=8, positions=4)
            stack = RefinerStack(cfg, np.random.default_rng(24))
            x = Tensor(np.random.default_rng(25).normal(size=(4, 6)).astype(np.float32))
            out = stack(x)
            assert out is x

    def test_mode_none_is_bit_exact_identity_for_any_layer_count(self):
        cfg = RefineConfig(mode="none", layers=3, heads=2, d_model=6, d_ff=8)
        stack = RefinerStack(cfg, np.random.default_rng(26))
        x = Tensor(np.random.default_rng(27).normal(size=(4, 6)).astype(np.float32))
        assert stack(x) is x

    def test_two_layers_equal_composition_of_single_layers(self):
        cfg = RefineConfig(mode="cascade", layers=2, heads=2, d_model=6,
                           d_ff=8, positions=4)
        stack = RefinerStack(cfg, np.random.default_rng(28))
        x = Tensor(np.random.default_rng(29).normal(size=(4, 6)).astype(np.float32))
        got = stack(x).data
        want = stack.layers[1](stack.layers[0](x)).data
        assert np.array_equal(got, want)

    def test_full_layer_scalar_loop_oracle(self):
        cfg = RefineConfig(mode="cascade", layers=1, heads=2, d_model=4,
                           d_ff=6, positions=3)
        layer = RefineLayer(cfg, np.random.default_rng(30))
        x = np.random.default_rng(31).normal(size=(3, 4)).astype(np.float32)
        block_out = oracles.loop_cascade_block(
            x.tolist(), 2, spatial_params(layer.block.spatial),
            channel_params(layer.block.channel))
        ffn_out = oracles.loop_ffn(block_out,
                                   layer.ffn.w1.data.tolist(), layer.ffn.b1.data.tolist(),
                                   layer.ffn.w2.data.tolist(), layer.ffn.b2.data.tolist())
        normed = oracles.loop_layer_norm_rows(ffn_out,
                                              layer.ffn_norm.gamma.data.tolist(),
                                              layer.ffn_norm.beta.data.tolist())
        want = oracles.loop_add(normed, block_out)
        got = layer(Tensor(x)).data
        assert np.abs(got - np.array(want)).max() < 1e-5

    def test_invalid_mode_is_config_error(self):
        with pytest.raises(ConfigError, match="unknown refine mode"):
            RefineConfig(mode="diagonal", layers=1, heads=2, d_model=4)

    def test_spatial_stack_permutation_equivariance(self):
        cfg = RefineConfig(mode="spatial", layers=2, heads=2, d_model=8, d_ff=16,
                           positions=6)
        stack = RefinerStack(cfg, np.random.default_rng(32))
        rng = np.random.default_rng(33)
        x = rng.normal(size=(6, 8)).astype(np.float32)
        perm = rng.permutation(6)
        direct = stack(Tensor(x[perm])).data
        permuted = stack(Tensor(x)).data[perm]
        assert np.abs(direct - permuted).max() < 1e-5

    def test_output_shape_for_all_modes(self):
        rng = np.random.default_rng(34)
        for mode in ("spatial", "channel", "parallel", "cascade"):
            cfg = RefineConfig(mode=mode, layers=2, heads=2, d_model=8,
                               d_ff=8, positions=4)
            stack = RefinerStack(cfg, np.random.default_rng(35))
            x = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
            assert stack(x).shape == (4, 8)


@pytest.mark.parametrize("mode", ["spatial", "channel", "parallel", "cascade"])
def test_refine_layer_grad_check(mode):
    def make_case(rng):
        cfg = RefineConfig(mode=mode, layers=1, heads=2, channel_heads=1,
                           d_model=6, d_ff=8, positions=4)
        layer = RefineLayer(cfg, rng, np.float64)
        x = Tensor(rng.normal(size=(4, 6)))
        coeffs = Tensor(rng.normal(size=(4, 6)))

        def loss():
            return (layer(x) * coeffs).sum()

        return loss, layer.parameters()

    loss_fn, params = build_safe_case(make_case, np.random.default_rng(36))
    assert grad_check(loss_fn, params, h=1e-5) < 1e-4
