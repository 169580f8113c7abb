"""capsight: a desk-scale one-stage image captioner, fully testable.

Precomputed grid-feature pyramids are aligned and channel-gated, refined
with non-local attention in the position and channel axes, and decoded by
a small transformer. Training covers cross-entropy and self-critical
(CIDEr-D reward) stages; BLEU, ROUGE-L, and CIDEr-D are implemented from
scratch. Every differentiable block is validated by finite differences.
"""

from capsight.backbone import GridFeatureSet, MultiLevelAligner, StubPyramidBackbone
from capsight.data import CaptionDataset, CaptionItem, Vocabulary, build_vocab, synth_dataset
from capsight.estimator import CaptionerEstimator
from capsight.model import Captioner, ModelConfig
from capsight.training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Captioner",
    "CaptionerEstimator",
    "CaptionDataset",
    "CaptionItem",
    "GridFeatureSet",
    "ModelConfig",
    "MultiLevelAligner",
    "StubPyramidBackbone",
    "TrainConfig",
    "Vocabulary",
    "build_vocab",
    "synth_dataset",
    "train",
    "__version__",
]
