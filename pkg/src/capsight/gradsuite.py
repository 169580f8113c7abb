"""Finite-difference gradient checks for every differentiable block.

Each case builds a small randomly-configured block in 64-bit, forms a
scalar loss (a random linear functional of the output unless the block is
itself a loss), and compares reverse-mode gradients against central
differences. Inputs are resampled whenever a rectifier input lands within
1e-3 of its kink.
"""

from __future__ import annotations

import zlib

import numpy as np

from capsight.backbone import GridFeatureSet
from capsight.data import BOS_ID, EOS_ID
from capsight.decoder import CaptionDecoder, DecoderConfig
from capsight.gate import ChannelGate
from capsight.model import Captioner, ModelConfig
from capsight.nn import functional as F
from capsight.nn import tensor as T
from capsight.nn.gradcheck import build_safe_case, grad_check
from capsight.nn.module import FeedForward, LayerNorm, Linear, MultiHeadAttention
from capsight.nn.tensor import Parameter, Tensor
from capsight.refiner import RefineConfig, RefineLayer
from capsight.training import sequence_log_prob, xe_loss

F64 = np.float64


def _probe_loss(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random linear functional of the output, so every output grad is exercised."""
    coeffs = Tensor(rng.normal(size=out.shape).astype(F64))
    return (out * coeffs).sum()


def _case_linear(rng):
    layer = Linear(3, 4, rng, F64)
    x = Tensor(rng.normal(size=(5, 3)))
    coeffs = rng.normal(size=(5, 4))

    def loss_fn():
        return ((layer(x) - Tensor(coeffs)) ** 2).sum()

    return loss_fn, layer.parameters()


def _case_layer_norm(rng):
    norm = LayerNorm(6, axis=-1, dtype=F64)
    norm.gamma.data = rng.normal(1.0, 0.2, size=6)
    norm.beta.data = rng.normal(0.0, 0.2, size=6)
    x = Tensor(rng.normal(size=(4, 6)))
    coeffs = Tensor(rng.normal(size=(4, 6)))

    def loss_fn():
        return (norm(x) * coeffs).sum()

    return loss_fn, norm.parameters()


def _case_ffn(rng):
    ffn = FeedForward(5, 7, rng, F64)
    x = Tensor(rng.normal(size=(3, 5)))
    coeffs = Tensor(rng.normal(size=(3, 5)))

    def loss_fn():
        return (ffn(x) * coeffs).sum()

    return loss_fn, ffn.parameters()


def _case_attention(rng):
    attn = MultiHeadAttention(8, 2, rng, F64)
    x = Tensor(rng.normal(size=(4, 8)))
    coeffs = Tensor(rng.normal(size=(4, 8)))

    def loss_fn():
        return (attn(x, x) * coeffs).sum()

    return loss_fn, attn.parameters()


def _case_gate(rng):
    gate = ChannelGate(8, bottleneck=3, rng=rng, dtype=F64)
    x = Tensor(rng.normal(size=(5, 8)))
    coeffs = Tensor(rng.normal(size=(5, 8)))

    def loss_fn():
        return (gate(x) * coeffs).sum()

    return loss_fn, gate.parameters()


def _refiner_case(mode):
    def build(rng):
        cfg = RefineConfig(mode=mode, layers=1, heads=2, channel_heads=1,
                           d_model=6, d_ff=8, positions=4)
        layer = RefineLayer(cfg, rng, F64)
        x = Tensor(rng.normal(size=(4, 6)))
        coeffs = Tensor(rng.normal(size=(4, 6)))

        def loss_fn():
            return (layer(x) * coeffs).sum()

        return loss_fn, layer.parameters()

    return build


def _case_decoder_layer(rng):
    cfg = DecoderConfig(vocab_size=9, d_model=8, heads=2, layers=1, d_ff=12, l_max=6)
    decoder = CaptionDecoder(cfg, rng, F64)
    memory = Tensor(rng.normal(size=(3, 8)))
    ids = np.array([BOS_ID, 5, 7, 4], dtype=np.int64)
    coeffs = Tensor(rng.normal(size=(4, 9)))

    def loss_fn():
        return (decoder(ids, memory) * coeffs).sum()

    return loss_fn, decoder.parameters()


def _case_xe_loss(rng):
    layer = Linear(6, 8, rng, F64)
    x = Tensor(rng.normal(size=(5, 6)))
    targets = rng.integers(1, 8, size=5)

    def loss_fn():
        return xe_loss(layer(x), targets)

    return loss_fn, layer.parameters()


def _case_scst_surrogate(rng):
    """Frozen samples and rewards make the surrogate a smooth function of theta."""
    cfg = DecoderConfig(vocab_size=8, d_model=8, heads=2, layers=1, d_ff=12, l_max=6)
    decoder = CaptionDecoder(cfg, rng, F64)
    memory = Tensor(rng.normal(size=(3, 8)))
    samples = []
    for _ in range(3):
        length = int(rng.integers(2, 5))
        body = rng.integers(4, 8, size=length).tolist()
        samples.append([BOS_ID] + body + [EOS_ID])
    rewards = rng.normal(size=3)
    baseline = rewards.mean()

    def loss_fn():
        terms = [
            sequence_log_prob(decoder, ids, memory) * float(r - baseline)
            for ids, r in zip(samples, rewards)
        ]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (-1.0 / len(samples))

    return loss_fn, decoder.parameters()


def _case_encoder_full(rng):
    """Gate plus one cascade refiner layer, end to end through the aligner."""
    cfg = ModelConfig(
        vocab_size=8, level_widths=[5, 6, 7, 8], positions=4,
        d_model=6, heads=2, decoder_layers=1, d_ff=8,
        refine_mode="cascade", refine_layers=1, gate_bottleneck=4,
    )
    model = Captioner(cfg, rng, F64)
    levels = [
        np.asarray(rng.normal(size=(16, 5))),
        np.asarray(rng.normal(size=(16, 6))),
        np.asarray(rng.normal(size=(4, 7))),
        np.asarray(rng.normal(size=(4, 8))),
    ]
    coeffs = Tensor(rng.normal(size=(4, 6)))
    encoder_params = [
        (name, p) for name, p in model.named_parameters() if not name.startswith("decoder")
    ]

    def loss_fn():
        return (model.encode(levels) * coeffs).sum()

    return loss_fn, [p for _, p in encoder_params]


CASES = {
    "linear": _case_linear,
    "layer_norm": _case_layer_norm,
    "ffn": _case_ffn,
    "attention": _case_attention,
    "gate": _case_gate,
    "refiner_spatial": _refiner_case("spatial"),
    "refiner_channel": _refiner_case("channel"),
    "refiner_parallel": _refiner_case("parallel"),
    "refiner_cascade": _refiner_case("cascade"),
    "decoder": _case_decoder_layer,
    "xe_loss": _case_xe_loss,
    "scst_surrogate": _case_scst_surrogate,
    "encoder_full": _case_encoder_full,
}


def run_gradient_suite(trials: int = 5, h: float = 1e-5, seed: int = 42,
                       blocks=None) -> dict[str, float]:
    """Max relative FD error per block over ``trials`` random configurations."""
    results = {}
    names = list(CASES) if blocks is None else list(blocks)
    for name in names:
        build = CASES[name]
        stream = zlib.crc32(name.encode())
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, stream, trial])
            loss_fn, params = build_safe_case(build, rng)
            worst = max(worst, grad_check(loss_fn, params, h=h))
        results[name] = worst
    return results
