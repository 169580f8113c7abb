"""Scikit-learn-style front door for the captioner.

``CaptionerEstimator.fit(X, y)`` trains on feature pyramids and raw
caption strings; ``predict`` decodes captions; ``score`` returns corpus
CIDEr-D. Hyperparameters follow the BaseEstimator contract (stored
verbatim, introspectable via ``get_params``), so the model drops into
pipelines, grid search, and ``clone``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from capsight.backbone import GridFeatureSet
from capsight.data import CaptionDataset, CaptionItem, build_vocab
from capsight.errors import DataError
from capsight.metrics import cider_d, tokenize
from capsight.model import Captioner, ModelConfig
from capsight.training import TrainConfig, train


def check_feature_pyramids(X) -> list[GridFeatureSet]:
    """Validate a list of 4-level feature pyramids (arrays or GridFeatureSet)."""
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise DataError("X must be a non-empty list of 4-level feature pyramids")
    pyramids = []
    shape = None
    for i, entry in enumerate(X):
        gfs = entry if isinstance(entry, GridFeatureSet) else GridFeatureSet(list(entry))
        sig = [(level.shape[0], level.shape[1]) for level in gfs.levels]
        if shape is None:
            shape = sig
        elif sig != shape:
            raise DataError(f"X[{i}] has level shapes {sig}, expected {shape}")
        pyramids.append(gfs)
    return pyramids


def check_captions(y, n: int) -> list[list[list[str]]]:
    """Normalize targets to per-item lists of tokenized references."""
    if not isinstance(y, (list, tuple)) or len(y) != n:
        raise DataError(f"y must be a list of {n} captions or reference lists")
    refs = []
    for i, entry in enumerate(y):
        if isinstance(entry, str):
            entry = [entry]
        if not isinstance(entry, (list, tuple)) or not entry:
            raise DataError(f"y[{i}] must be a caption string or a non-empty list of them")
        tokenized = [tokenize(c) if isinstance(c, str) else [str(t) for t in c] for c in entry]
        if any(not cap for cap in tokenized):
            raise DataError(f"y[{i}] contains an empty caption")
        refs.append(tokenized)
    return refs


class CaptionerEstimator(BaseEstimator):
    """Fit/predict wrapper around the full training pipeline.

    Parameters mirror the model and training configs; ``scst_epochs > 0``
    appends a self-critical stage after cross-entropy training.
    """

    def __init__(self, d_model=64, heads=2, decoder_layers=1, d_ff=None,
                 refine_mode="cascade", refine_layers=1, channel_heads=1,
                 use_gate=True, gate_bottleneck=None, l_max=16,
                 epochs=20, max_steps=None, batch_size=4, base_lr=4e-4,
                 warmup_steps=100, scst_epochs=0, scst_samples=5,
                 vocab_min_count=0, beam_size=2, seed=42):
        self.d_model = d_model
        self.heads = heads
        self.decoder_layers = decoder_layers
        self.d_ff = d_ff
        self.refine_mode = refine_mode
        self.refine_layers = refine_layers
        self.channel_heads = channel_heads
        self.use_gate = use_gate
        self.gate_bottleneck = gate_bottleneck
        self.l_max = l_max
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.scst_epochs = scst_epochs
        self.scst_samples = scst_samples
        self.vocab_min_count = vocab_min_count
        self.beam_size = beam_size
        self.seed = seed

    def fit(self, X, y):
        pyramids = check_feature_pyramids(X)
        references = check_captions(y, len(pyramids))
        items = [
            CaptionItem(item_id=f"item{i:04d}", captions=refs, split="train", features=gfs)
            for i, (gfs, refs) in enumerate(zip(pyramids, references))
        ]
        dataset = CaptionDataset(items)
        vocab = build_vocab(dataset.all_captions("train"), self.vocab_min_count)
        first = pyramids[0]
        model_cfg = ModelConfig(
            vocab_size=len(vocab),
            level_widths=first.channel_widths,
            positions=first.coarse_positions,
            d_model=self.d_model,
            heads=self.heads,
            decoder_layers=self.decoder_layers,
            d_ff=self.d_ff,
            refine_mode=self.refine_mode,
            refine_layers=self.refine_layers,
            channel_heads=self.channel_heads,
            use_gate=self.use_gate,
            gate_bottleneck=self.gate_bottleneck,
            l_max=self.l_max,
        )
        model = Captioner(model_cfg, np.random.default_rng(self.seed))
        xe_cfg = TrainConfig(
            stage="xe", epochs=self.epochs, max_steps=self.max_steps,
            batch_size=self.batch_size, base_lr=self.base_lr,
            warmup_steps=self.warmup_steps, seed=self.seed,
        )
        train(model, vocab, dataset, xe_cfg)
        if self.scst_epochs > 0:
            scst_cfg = TrainConfig(
                stage="scst", epochs=self.scst_epochs, batch_size=self.batch_size,
                scst_samples=self.scst_samples, seed=self.seed,
            )
            train(model, vocab, dataset, scst_cfg)
        self.model_ = model
        self.vocab_ = vocab
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this CaptionerEstimator instance is not fitted yet")

    def predict(self, X) -> list[str]:
        self._check_fitted()
        pyramids = check_feature_pyramids(X)
        return [self.model_.caption_text(gfs, self.vocab_, beam=self.beam_size)[0]
                for gfs in pyramids]

    def score(self, X, y) -> float:
        """Corpus CIDEr-D of the decoded captions against the references."""
        self._check_fitted()
        references = check_captions(y, len(X))
        predictions = [tokenize(text) for text in self.predict(X)]
        corpus, _ = cider_d(predictions, references)
        return corpus
