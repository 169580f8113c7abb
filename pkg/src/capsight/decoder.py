"""Transformer decoder over the refined feature sequence, plus decoding.

The decoder is the standard masked-self-attention / cross-attention / FFN
stack with post-sublayer normalization and sinusoidal position encodings on
the token embeddings (the encoder sequence carries none). Greedy, beam, and
multinomial decoding all cap captions at ``l_max`` content tokens and stop
at the first end token; ties break toward the lowest token id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from capsight.data import BOS_ID, EOS_ID, L_MAX
from capsight.errors import ConfigError, DataError, DimensionError
from capsight.nn import functional as F
from capsight.nn import tensor as T
from capsight.nn.module import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from capsight.nn.tensor import Parameter, Tensor, no_grad


@dataclass
class DecoderConfig:
    vocab_size: int
    d_model: int = 512
    heads: int = 8
    layers: int = 1
    d_ff: int | None = None
    l_max: int = L_MAX
    eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ConfigError(f"vocabulary must cover the reserved ids, got size {self.vocab_size}")
        if self.l_max < 1:
            raise ConfigError(f"l_max must be >= 1, got {self.l_max}")
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ConfigError(f"model width {self.d_model} is not divisible by {self.heads} heads")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model


def sinusoid_table(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Standard sinusoidal position encodings, [length, d_model]."""
    positions = np.arange(length)[:, None].astype(np.float64)
    dims = np.arange(d_model)[None, :].astype(np.float64)
    angles = positions / np.power(10000.0, (2.0 * (dims // 2)) / d_model)
    table = np.where(dims % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(dtype)


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng, dtype)
        self.norm1 = LayerNorm(cfg.d_model, axis=-1, eps=cfg.eps, dtype=dtype)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng, dtype)
        self.norm2 = LayerNorm(cfg.d_model, axis=-1, eps=cfg.eps, dtype=dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, dtype)
        self.norm3 = LayerNorm(cfg.d_model, axis=-1, eps=cfg.eps, dtype=dtype)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray,
                 taps: dict | None = None, tag: str = "") -> Tensor:
        sink = [] if taps is not None else None
        x = self.norm1(x + self.self_attn(x, x, mask=mask))
        x = self.norm2(x + self.cross_attn(x, memory, weights_sink=sink))
        x = self.norm3(x + self.ffn(x))
        if taps is not None:
            for i, attn in enumerate(sink):
                taps[f"{tag}.cross.head{i}"] = attn
        return x


class CaptionDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = np.random.default_rng(42) if rng is None else rng
        self.cfg = cfg
        self.embedding = Parameter(
            rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_model)).astype(dtype))
        self.layers = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.out = Linear(cfg.d_model, cfg.vocab_size, rng, dtype)
        self._pos_table = sinusoid_table(cfg.l_max + 2, cfg.d_model, dtype)
        self._embed_scale = math.sqrt(cfg.d_model)

    def __call__(self, ids, memory: Tensor, taps: dict | None = None) -> Tensor:
        """Next-token logits for every position of ``ids``, causally masked."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise DataError("decoder input must be a non-empty 1-d id sequence")
        if ids[0] != BOS_ID:
            raise DataError(f"decoder input must start with BOS (id {BOS_ID}), got {ids[0]}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise DataError(
                f"token id out of range: ids span [{ids.min()}, {ids.max()}], "
                f"vocabulary size {self.cfg.vocab_size}"
            )
        if ids.size > self._pos_table.shape[0]:
            raise DataError(f"sequence length {ids.size} exceeds l_max + 2 = {self._pos_table.shape[0]}")
        if memory.shape[-1] != self.cfg.d_model:
            raise DimensionError(
                f"memory width {memory.shape[-1]} does not match model width {self.cfg.d_model}"
            )
        t = ids.size
        x = T.gather_rows(self.embedding, ids) * self._embed_scale
        x = x + Tensor(self._pos_table[:t])
        mask = F.causal_mask(t)
        for i, layer in enumerate(self.layers):
            x = layer(x, memory, mask, taps=taps, tag=f"decoder{i}")
        return self.out(x)


# -- decoding strategies -------------------------------------------------------------


def _last_log_probs(decoder: CaptionDecoder, ids: list[int], memory: Tensor) -> np.ndarray:
    with no_grad():
        logits = decoder(ids, memory)
    row = logits.data[-1].astype(np.float64)
    row -= row.max()
    return row - math.log(np.exp(row).sum())


def greedy_decode(decoder: CaptionDecoder, memory: Tensor, l_max: int | None = None) -> list[int]:
    """Argmax decoding from BOS until EOS or the content-length cap."""
    l_max = decoder.cfg.l_max if l_max is None else l_max
    ids = [BOS_ID]
    for _ in range(l_max):
        tok = int(np.argmax(_last_log_probs(decoder, ids, memory)))
        ids.append(tok)
        if tok == EOS_ID:
            break
    return ids


def beam_search(decoder: CaptionDecoder, memory: Tensor, beam: int = 2,
                l_max: int | None = None) -> tuple[list[int], list[tuple[list[int], float]]]:
    """Length-normalized beam search.

    Returns the best sequence and the n-best pool as (ids, score) pairs,
    where score is the log-probability sum divided by the token count after
    BOS. Hypotheses whose top-ranked expansion is EOS retire into the pool;
    survivors at the length cap join it unterminated.
    """
    if beam < 1:
        raise ConfigError(f"beam size must be >= 1, got {beam}")
    l_max = decoder.cfg.l_max if l_max is None else l_max
    live: list[tuple[list[int], float]] = [([BOS_ID], 0.0)]
    pool: list[tuple[list[int], float]] = []
    for _ in range(l_max):
        expansions: list[tuple[list[int], float]] = []
        for ids, score in live:
            logp = _last_log_probs(decoder, ids, memory)
            expansions.extend((ids + [tok], score + float(logp[tok]))
                              for tok in range(logp.size))
        expansions.sort(key=lambda e: (-e[1], e[0]))
        top = expansions[:beam]
        live = []
        for ids, score in top:
            if ids[-1] == EOS_ID:
                pool.append((ids, score))
            else:
                live.append((ids, score))
        if not live:
            break
    pool.extend(live)

    def normalized(entry):
        ids, score = entry
        return score / (len(ids) - 1)

    ranked = sorted(pool, key=lambda e: (-normalized(e), e[0]))
    nbest = []
    seen = set()
    for entry in ranked:
        key = tuple(entry[0])
        if key not in seen:
            seen.add(key)
            nbest.append((entry[0], normalized(entry)))
    return nbest[0][0], nbest


def sample_decode(decoder: CaptionDecoder, memory: Tensor, rng: np.random.Generator,
                  greedy: bool = False,
                  l_max: int | None = None) -> tuple[list[int], list[float]]:
    """Multinomial sampling per step; ``greedy=True`` is the argmax shortcut.

    Returns the sequence and the per-step log-probabilities of the chosen
    tokens (the trace needed for policy-gradient training).
    """
    l_max = decoder.cfg.l_max if l_max is None else l_max
    ids = [BOS_ID]
    trace: list[float] = []
    for _ in range(l_max):
        logp = _last_log_probs(decoder, ids, memory)
        if greedy:
            tok = int(np.argmax(logp))
        else:
            probs = np.exp(logp)
            probs /= probs.sum()
            tok = int(rng.choice(logp.size, p=probs))
        ids.append(tok)
        trace.append(float(logp[tok]))
        if tok == EOS_ID:
            break
    return ids, trace


def scheduled_sampling_forward(decoder: CaptionDecoder, ids, memory: Tensor,
                               p: float, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Teacher forcing with probability-p substitution of model predictions.

    Every input position after BOS is independently replaced, with
    probability ``p``, by a token sampled from the model's previous-step
    distribution (computed in a preliminary no-grad pass). Returns the
    logits of the final pass and the mixed input actually used. ``p=0``
    is exactly the plain decoder forward.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"scheduled-sampling probability must be in [0, 1], got {p}")
    ids = np.asarray(ids, dtype=np.int64)
    if p == 0.0:
        return decoder(ids, memory), ids.copy()
    with no_grad():
        prelim = decoder(ids, memory).data.astype(np.float64)
    sampled = np.empty(ids.size - 1, dtype=np.int64)
    for t in range(ids.size - 1):
        row = prelim[t] - prelim[t].max()
        probs = np.exp(row)
        probs /= probs.sum()
        sampled[t] = rng.choice(probs.size, p=probs)
    replace = rng.random(ids.size - 1) < p
    mixed = ids.copy()
    mixed[1:] = np.where(replace, sampled, ids[1:])
    return decoder(mixed, memory), mixed
