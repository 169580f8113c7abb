"""Optimization: cross-entropy and self-critical stages, Adam, schedules.

The cross-entropy stage follows linear learning-rate warmup with step
decay from a configured epoch; the self-critical stage decays every few
epochs and maximizes the CIDEr-D reward of sampled captions against a
mean-of-samples baseline (optionally the greedy caption's reward).

All randomness is drawn from generators derived from (seed, epoch), so a
run is reproducible and resumable from any epoch boundary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from capsight.data import (BOS_ID, EOS_ID, PAD_ID, CaptionDataset, Vocabulary,
                           decode_tokens, encode)
from capsight.decoder import greedy_decode, sample_decode, scheduled_sampling_forward
from capsight.errors import ConfigError, DataError, NumericsError
from capsight.metrics import CorpusIdf, build_idf, cider_d_single
from capsight.model import Captioner
from capsight.nn import tensor as T
from capsight.nn.tensor import Parameter, Tensor

STAGES = ("xe", "scst")


@dataclass
class TrainConfig:
    stage: str = "xe"
    epochs: int = 15
    max_steps: int | None = None
    batch_size: int = 4
    base_lr: float | None = None
    warmup_steps: int = 100
    decay_factor: float = 0.1
    decay_start_epoch: int = 9
    scst_decay_every: int = 3
    ss_increment: float = 0.05
    ss_every: int = 3
    scst_samples: int = 5
    scst_baseline: str = "mean"
    grad_clip: float = 5.0
    seed: int = 42
    vocab_min_count: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown training stage {self.stage!r}, expected one of {STAGES}")
        if self.base_lr is None:
            self.base_lr = 4e-4 if self.stage == "xe" else 4e-5
        for name in ("base_lr", "decay_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.stage == "scst" and self.scst_samples < 2:
            raise ConfigError("self-critical training needs at least 2 samples per image")
        if self.scst_baseline not in ("mean", "greedy"):
            raise ConfigError(f"unknown baseline {self.scst_baseline!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, epoch: int, cfg: TrainConfig) -> float:
    """Learning rate at a (1-indexed) step and epoch.

    XE: linear warmup times step decay from ``decay_start_epoch``.
    SCST: step decay every ``scst_decay_every`` epochs.
    """
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if cfg.stage == "xe":
        warm = min(1.0, step / cfg.warmup_steps) if cfg.warmup_steps > 0 else 1.0
        decay = cfg.decay_factor ** max(0, epoch - (cfg.decay_start_epoch - 1))
        return cfg.base_lr * warm * decay
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.scst_decay_every)


def scheduled_sampling_p(epoch: int, cfg: TrainConfig) -> float:
    return min(1.0, cfg.ss_increment * (epoch // cfg.ss_every))


# -- losses ----------------------------------------------------------------------


def xe_loss(logits: Tensor, targets, pad_id: int = PAD_ID,
            reduction: str = "mean") -> Tensor:
    """Cross entropy of next-token targets; PAD positions are masked out."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 1 or targets.size != logits.shape[0]:
        raise DataError(
            f"targets length {targets.size} does not match logits rows {logits.shape[0]}"
        )
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise DataError("target id out of vocabulary range")
    mask = (targets != pad_id).astype(logits.dtype)
    count = float(mask.sum())
    if count == 0:
        raise DataError("all target positions are padding")
    picked = T.take_along_rows(T.log_softmax(logits, axis=-1), targets)
    total = -(picked * Tensor(mask)).sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / count)
    raise ConfigError(f"unknown reduction {reduction!r}")


def sequence_log_prob(decoder, ids: list[int], memory: Tensor) -> Tensor:
    """Differentiable log-probability of a full sampled sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise DataError("sequence must contain at least one token after BOS")
    logits = decoder(ids[:-1], memory)
    picked = T.take_along_rows(T.log_softmax(logits, axis=-1), ids[1:])
    return picked.sum()


def scst_step(model: Captioner, items, vocab: Vocabulary, idf: CorpusIdf,
              n_samples: int, rng: np.random.Generator,
              baseline: str = "mean") -> tuple[Tensor, dict]:
    """Policy-gradient surrogate for one batch of images.

    For each image, ``n_samples`` captions are sampled, scored with CIDEr-D
    against the references, and baselined (mean of the samples, or the
    greedy caption's reward). The surrogate is
    ``-(1/n) sum_i (r_i - b) log p(y_i)`` averaged over the batch; its
    gradient is the REINFORCE estimator.
    """
    if n_samples < 2:
        raise ConfigError("self-critical step needs at least 2 samples per image")
    per_image_losses = []
    reward_sum = 0.0
    baseline_sum = 0.0
    advantage_sums = []
    for item in items:
        refs = item.captions
        if not refs:
            raise DataError(f"item {item.item_id} has no references for the reward")
        memory = model.encode(item.grid_features())
        samples = [sample_decode(model.decoder, memory, rng) for _ in range(n_samples)]
        rewards = [
            cider_d_single(decode_tokens(ids, vocab), refs, idf)
            for ids, _ in samples
        ]
        if baseline == "greedy":
            greedy_ids = greedy_decode(model.decoder, memory)
            b = cider_d_single(decode_tokens(greedy_ids, vocab), refs, idf)
        else:
            b = sum(rewards) / n_samples
        advantages = [r - b for r in rewards]
        terms = []
        for (ids, _), adv in zip(samples, advantages):
            if adv == 0.0:
                continue
            terms.append(sequence_log_prob(model.decoder, ids, memory) * adv)
        if terms:
            total = terms[0]
            for t in terms[1:]:
                total = total + t
            per_image_losses.append(total * (-1.0 / n_samples))
        else:
            per_image_losses.append(Tensor(np.zeros((), dtype=memory.dtype)))
        reward_sum += sum(rewards) / n_samples
        baseline_sum += b
        advantage_sums.append(sum(advantages))
    loss = per_image_losses[0]
    for extra in per_image_losses[1:]:
        loss = loss + extra
    loss = loss * (1.0 / len(per_image_losses))
    stats = {
        "reward_mean": reward_sum / len(per_image_losses),
        "baseline": baseline_sum / len(per_image_losses),
        "advantage_sums": advantage_sums,
    }
    return loss, stats


# -- optimizer --------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over named parameters."""

    def __init__(self, named_params: list[tuple[str, Parameter]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr: float) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / correct1
            v_hat = v / correct2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> tuple[dict, dict, int]:
        return self.m, self.v, self.t

    def load_state(self, m: dict, v: dict, t: int) -> None:
        for name, p in self.named_params:
            if name not in m or m[name].shape != p.data.shape:
                raise DataError(f"optimizer state missing or mismatched for {name!r}")
            self.m[name] = m[name].astype(p.data.dtype)
            self.v[name] = v[name].astype(p.data.dtype)
        self.t = int(t)


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- the training loop ---------------------------------------------------------------


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def _trim_pads(seq: np.ndarray) -> np.ndarray:
    """Drop trailing PADs; logits at the kept positions are unchanged."""
    keep = int(np.max(np.nonzero(seq != PAD_ID))) + 1
    return seq[:keep]


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    epoch: int = 0
    step: int = 0


def train(model: Captioner, vocab: Vocabulary, dataset: CaptionDataset,
          cfg: TrainConfig, optimizer: Adam | None = None,
          start_epoch: int = 1, start_step: int = 0,
          on_epoch_end=None) -> tuple[TrainResult, Adam]:
    """Run one training stage; returns the per-row log and the optimizer.

    Epochs are 1-indexed. ``on_epoch_end(epoch, step, optimizer)`` fires at
    every epoch boundary (checkpoint hook); a resumed run passes the saved
    counters and optimizer state and continues bit-identically.
    """
    items = dataset.split("train")
    if not items:
        raise DataError("training split is empty")
    if model.cfg.vocab_size != len(vocab):
        raise DataError(
            f"model vocabulary size {model.cfg.vocab_size} does not match vocabulary ({len(vocab)})"
        )
    optimizer = Adam(list(model.named_parameters())) if optimizer is None else optimizer
    params = [p for _, p in optimizer.named_params]
    result = TrainResult(epoch=start_epoch - 1, step=start_step)
    idf = build_idf([item.captions for item in items]) if cfg.stage == "scst" else None

    if cfg.stage == "xe":
        pairs = [(i, j) for i, item in enumerate(items) for j in range(len(item.captions))]
    else:
        pairs = [(i, 0) for i in range(len(items))]

    step = start_step
    done = False
    for epoch in range(start_epoch, cfg.epochs + 1):
        shuffle_rng = _epoch_rng(cfg.seed, epoch, 0)
        sample_rng = _epoch_rng(cfg.seed, epoch, 1)
        order = shuffle_rng.permutation(len(pairs))
        ss_p = scheduled_sampling_p(epoch, cfg)
        epoch_loss = 0.0
        epoch_loss_sum = 0.0
        epoch_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
            step += 1
            lr = lr_at(step, epoch, cfg)
            batch = [pairs[k] for k in order[lo:lo + cfg.batch_size]]
            model.zero_grad()
            if cfg.stage == "xe":
                losses = []
                sum_losses = 0.0
                for item_idx, cap_idx in batch:
                    item = items[item_idx]
                    seq = _trim_pads(encode(item.captions[cap_idx], vocab, model.cfg.l_max))
                    memory = model.encode(item.grid_features())
                    inputs, targets = seq[:-1], seq[1:]
                    if ss_p > 0.0:
                        logits, _ = scheduled_sampling_forward(
                            model.decoder, inputs, memory, ss_p, sample_rng)
                    else:
                        logits = model.decoder(inputs, memory)
                    loss_i = xe_loss(logits, targets)
                    losses.append(loss_i)
                    sum_losses += float(loss_i.data) * targets.size
                loss = losses[0]
                for extra in losses[1:]:
                    loss = loss + extra
                loss = loss * (1.0 / len(losses))
                row_stats = {"cider_d": "", "baseline": ""}
                epoch_loss_sum += sum_losses / len(losses)
            else:
                batch_items = [items[item_idx] for item_idx, _ in batch]
                loss, stats = scst_step(model, batch_items, vocab, idf,
                                        cfg.scst_samples, sample_rng,
                                        baseline=cfg.scst_baseline)
                row_stats = {"cider_d": stats["reward_mean"], "baseline": stats["baseline"]}
            if not np.all(np.isfinite(loss.data)):
                raise NumericsError(f"non-finite loss at step {step}")
            loss.backward()
            clip_global_norm(params, cfg.grad_clip)
            optimizer.step(lr)
            epoch_loss += float(loss.data)
            epoch_batches += 1
            if cfg.stage == "scst":
                result.history.append({
                    "epoch": epoch, "step": step, "lr": lr,
                    "loss": float(loss.data), "loss_sum": "", **row_stats,
                })
        if cfg.stage == "xe" and epoch_batches:
            result.history.append({
                "epoch": epoch, "step": step, "lr": lr_at(step, epoch, cfg),
                "loss": epoch_loss / epoch_batches,
                "loss_sum": epoch_loss_sum / epoch_batches,
                "cider_d": "", "baseline": "",
            })
        result.epoch = epoch
        result.step = step
        if on_epoch_end is not None:
            on_epoch_end(epoch, step, optimizer)
        if done:
            break
    return result, optimizer
