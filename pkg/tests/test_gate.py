"""Channel gate: squeeze, excite, gated norm-residual, and fusion."""

import numpy as np
import pytest

import oracles
from capsight.errors import DimensionError
from capsight.gate import ChannelGate
from capsight.nn import functional as F
from capsight.nn.gradcheck import build_safe_case, grad_check
from capsight.nn.module import Linear
from capsight.nn.tensor import Tensor


def make_gate(channels, bottleneck, seed=0, dtype=np.float32):
    return ChannelGate(channels, bottleneck=bottleneck,
                       rng=np.random.default_rng(seed), dtype=dtype)


class TestSqueeze:
    def test_column_means(self):
        gate = make_gate(2, 1)
        out = gate.squeeze(Tensor([[1.0, 3.0], [3.0, 5.0]]))
        assert np.allclose(out.data, [2.0, 4.0])

    def test_single_position_is_that_row(self):
        gate = make_gate(3, 1)
        out = gate.squeeze(Tensor([[4.0, 5.0, 6.0]]))
        assert np.allclose(out.data, [4, 5, 6])

    def test_constant_input(self):
        gate = make_gate(3, 1)
        out = gate.squeeze(Tensor(np.full((5, 3), 2.5)))
        assert np.allclose(out.data, [2.5, 2.5, 2.5])

    def test_empty_input_is_dimension_error(self):
        gate = make_gate(3, 1)
        with pytest.raises(DimensionError, match="non-empty"):
            gate.squeeze(Tensor(np.ones(3)))


class TestExcite:
    def test_all_zero_weights_give_half(self):
        gate = make_gate(4, 2)
        for layer in (gate.down, gate.up):
            layer.w.data[:] = 0
            layer.b.data[:] = 0
        out = gate.excite(Tensor(np.zeros(4)))
        assert np.allclose(out.data, [0.5] * 4)

    def test_large_bias_saturates_to_one(self):
        gate = make_gate(4, 2)
        gate.up.w.data[:] = 0
        gate.up.b.data[:] = 20.0
        out = gate.excite(Tensor(np.zeros(4)))
        assert np.allclose(out.data, 1.0, atol=1e-6)

    def test_scalar_loop_oracle_bottleneck(self):
        rng = np.random.default_rng(1)
        gate = make_gate(2, 1, seed=7)
        for _ in range(20):
            m = rng.normal(size=(3, 2)).astype(np.float32)
            got = gate.coefficients(Tensor(m)).data
            want = oracles.loop_gate_coefficients(
                m.tolist(),
                gate.down.w.data.tolist(), gate.down.b.data.tolist(),
                gate.up.w.data.tolist(), gate.up.b.data.tolist(),
            )
            assert np.abs(got - np.array(want)).max() < 1e-6

    def test_coefficients_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(2)
        gate = make_gate(8, 2, seed=3)
        for _ in range(50):
            m = Tensor(rng.normal(scale=5.0, size=(6, 8)).astype(np.float32))
            e = gate.coefficients(m).data
            assert np.all(e > 0.0) and np.all(e < 1.0)


class TestGateForward:
    def test_unit_gate_reduces_to_norm_plus_skip(self):
        gate = make_gate(6, 2, seed=4)
        gate.up.w.data[:] = 0
        gate.up.b.data[:] = 60.0  # sigmoid(60) == 1.0 in float32
        m = Tensor(np.random.default_rng(5).normal(size=(4, 6)).astype(np.float32))
        got = gate(m).data
        want = (F.layer_norm(m, -1, gate.norm.gamma, gate.norm.beta) + m).data
        assert np.allclose(got, want, atol=1e-6)

    def test_zero_input_gives_beta_broadcast(self):
        gate = make_gate(5, 2, seed=6)
        gate.norm.beta.data = np.arange(5, dtype=np.float32)
        out = gate(Tensor(np.zeros((3, 5), dtype=np.float32))).data
        assert np.allclose(out, np.tile(np.arange(5), (3, 1)))

    def test_zero_gate_reduces_to_beta_plus_input(self):
        # Force E == 0: norm input is all zeros, so the output is beta + M.
        gate = make_gate(5, 2, seed=8)
        gate.up.w.data[:] = 0
        gate.up.b.data[:] = -200.0
        gate.norm.beta.data = np.random.default_rng(9).normal(size=5).astype(np.float32)
        m = np.random.default_rng(10).normal(size=(4, 5)).astype(np.float32)
        out = gate(Tensor(m)).data
        assert np.allclose(out, gate.norm.beta.data + m, atol=1e-7)

    def test_scalar_loop_oracle_gated_norm_residual(self):
        rng = np.random.default_rng(11)
        gate = make_gate(4, 2, seed=12)
        for _ in range(20):
            m = rng.normal(size=(2, 4)).astype(np.float32)
            got = gate(Tensor(m)).data
            e = gate.coefficients(Tensor(m)).data
            want = oracles.loop_gate_forward(
                m.tolist(), e.tolist(),
                gate.norm.gamma.data.tolist(), gate.norm.beta.data.tolist())
            assert np.abs(got - np.array(want)).max() < 1e-6

    def test_shape_preserved_and_taps_recorded(self):
        gate = make_gate(8, 2, seed=13)
        taps = {}
        m = Tensor(np.random.default_rng(14).normal(size=(5, 8)).astype(np.float32))
        out = gate(m, taps=taps)
        assert out.shape == (5, 8)
        assert taps["gate_coefficients"].shape == (8,)
        assert taps["gate_input"].shape == (5, 8)

    def test_squeeze_locality_per_channel_block(self):
        # Changing one channel block of the input changes the squeeze vector
        # only inside that block.
        gate = make_gate(8, 2, seed=15)
        rng = np.random.default_rng(16)
        m = rng.normal(size=(6, 8)).astype(np.float32)
        base = gate.squeeze(Tensor(m)).data
        bumped = m.copy()
        bumped[:, 2:4] += 1.0
        out = gate.squeeze(Tensor(bumped)).data
        changed = np.abs(out - base) > 1e-8
        assert changed[2:4].all() and not changed[[0, 1, 4, 5, 6, 7]].any()


class TestFuse:
    def test_zero_weights_give_bias_rows(self):
        rng = np.random.default_rng(17)
        fuse = Linear(8, 2, rng)
        fuse.w.data[:] = 0
        fuse.b.data = np.array([3.0, 4.0], dtype=np.float32)
        out = fuse(Tensor(np.ones((5, 8), dtype=np.float32))).data
        assert np.allclose(out, np.tile([3.0, 4.0], (5, 1)))

    def test_block_identity_selects_one_sight(self):
        rng = np.random.default_rng(18)
        fuse = Linear(8, 2, rng)
        fuse.w.data[:] = 0
        fuse.w.data[0:2] = np.eye(2, dtype=np.float32)
        fuse.b.data[:] = 0
        m = rng.normal(size=(4, 8)).astype(np.float32)
        out = fuse(Tensor(m)).data
        assert np.allclose(out, m[:, 0:2], atol=1e-7)

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(19)
        fuse = Linear(6, 3, rng)
        m = rng.normal(size=(4, 6)).astype(np.float32)
        got = fuse(Tensor(m)).data
        want = oracles.loop_linear(m.tolist(), fuse.w.data.tolist(), fuse.b.data.tolist())
        assert np.abs(got - np.array(want)).max() < 1e-6


def test_gate_block_grad_check():
    def make_case(rng):
        gate = ChannelGate(8, bottleneck=3, rng=rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(5, 8)))
        coeffs = Tensor(rng.normal(size=(5, 8)))

        def loss():
            return (gate(x) * coeffs).sum()

        return loss, gate.parameters()

    loss_fn, params = build_safe_case(make_case, np.random.default_rng(20))
    assert grad_check(loss_fn, params, h=1e-5) < 1e-4
