"""Vocabulary, caption datasets, and the synthetic desk-scale generator."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from capsight.backbone import GridFeatureSet
from capsight.errors import ConfigError, DataError, FormatError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]

L_MAX = 16
SPLITS = ("train", "val", "test")


class Vocabulary:
    """Token <-> id maps with fixed reserved ids 0..3."""

    def __init__(self, tokens: list[str]):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id_of(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.itos[idx]

    def to_json(self) -> list[str]:
        return self.itos[len(RESERVED):]

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Vocabulary":
        return cls(tokens)


def build_vocab(captions: list[list[str]], min_occurrences: int = 5) -> Vocabulary:
    """Keep tokens occurring strictly more than ``min_occurrences`` times.

    Ids are assigned by descending count, ties broken lexicographically, so
    the same corpus always yields the same vocabulary.
    """
    if not captions:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for cap in captions for tok in cap)
    kept = [tok for tok, n in counts.items() if n > min_occurrences]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(kept)


def encode(tokens: list[str], vocab: Vocabulary, l_max: int = L_MAX) -> np.ndarray:
    """BOS + up to ``l_max`` content ids + EOS, padded to a fixed length."""
    ids = [vocab.id_of(tok) for tok in tokens[:l_max]]
    seq = [BOS_ID] + ids + [EOS_ID]
    seq += [PAD_ID] * (l_max + 2 - len(seq))
    return np.asarray(seq, dtype=np.int64)


def decode_tokens(ids, vocab: Vocabulary) -> list[str]:
    """Invert ``encode`` up to truncation: drop BOS, stop at EOS/PAD."""
    out = []
    for idx in ids:
        idx = int(idx)
        if idx == BOS_ID:
            continue
        if idx in (EOS_ID, PAD_ID):
            break
        out.append(vocab.token_of(idx))
    return out


@dataclass
class CaptionItem:
    item_id: str
    captions: list[list[str]]
    split: str = "train"
    features: GridFeatureSet | None = None
    feature_path: str | None = None

    def grid_features(self) -> GridFeatureSet:
        if self.features is None:
            if self.feature_path is None:
                raise DataError(f"item {self.item_id} has no feature source")
            self.features = GridFeatureSet.load(self.feature_path)
        return self.features


@dataclass
class CaptionDataset:
    items: list[CaptionItem] = field(default_factory=list)

    def __post_init__(self):
        for item in self.items:
            if not item.captions:
                raise DataError(f"item {item.item_id} has no captions")
            if item.split not in SPLITS:
                raise DataError(f"item {item.item_id} has unknown split {item.split!r}")

    def __len__(self) -> int:
        return len(self.items)

    def split(self, name: str) -> list[CaptionItem]:
        return [item for item in self.items if item.split == name]

    def all_captions(self, split: str | None = "train") -> list[list[str]]:
        items = self.items if split is None else self.split(split)
        return [cap for item in items for cap in item.captions]


def load_karpathy_json(path, features_dir=None, features_ext: str = ".oft") -> CaptionDataset:
    """Read a Karpathy-split-style JSON file.

    Expected shape: ``{"images": [{"filepath", "split", "sentences": [{"tokens"}]}]}``.
    The "restval" split folds into train; feature paths are derived from each
    filepath by swapping its extension for ``features_ext`` under ``features_dir``.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise FormatError(f"{path}: missing top-level 'images' list")
    split_map = {"train": "train", "restval": "train", "val": "val", "test": "test"}
    items = []
    for i, image in enumerate(doc["images"]):
        where = f"{path}: images[{i}]"
        for key in ("filepath", "split", "sentences"):
            if key not in image:
                raise FormatError(f"{where}: missing field {key!r}")
        split = image["split"]
        if split not in split_map:
            raise FormatError(f"{where}: unknown split label {split!r}")
        captions = []
        for j, sent in enumerate(image["sentences"]):
            if "tokens" not in sent:
                raise FormatError(f"{where}.sentences[{j}]: missing field 'tokens'")
            captions.append([str(tok) for tok in sent["tokens"]])
        if not captions:
            raise FormatError(f"{where}: image has no sentences")
        rel = Path(image["filepath"]).with_suffix(features_ext)
        feature_path = str(Path(features_dir) / rel) if features_dir is not None else str(rel)
        items.append(CaptionItem(
            item_id=Path(image["filepath"]).stem,
            captions=captions,
            split=split_map[split],
            feature_path=feature_path,
        ))
    return CaptionDataset(items)


def load_manifest(path) -> CaptionDataset:
    """Read the dataset manifest JSON written next to generated feature files."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "items" not in doc:
        raise FormatError(f"{path}: missing top-level 'items' list")
    items = []
    for i, entry in enumerate(doc["items"]):
        for key in ("id", "features", "captions", "split"):
            if key not in entry:
                raise FormatError(f"{path}: items[{i}]: missing field {key!r}")
        feature_path = entry["features"]
        if not Path(feature_path).is_absolute():
            feature_path = str(path.parent / feature_path)
        items.append(CaptionItem(
            item_id=str(entry["id"]),
            captions=[[str(t) for t in cap] for cap in entry["captions"]],
            split=entry["split"],
            feature_path=feature_path,
        ))
    return CaptionDataset(items)


# -- synthetic data ---------------------------------------------------------------

COLORS = ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"]
SHAPES = ["circle", "square", "triangle", "star", "ring", "cross", "arrow", "dot"]
RELATIONS = ["above", "below", "beside", "behind", "near", "inside", "outside", "against"]

SYNTH_POSITIONS = (64, 16, 4, 4)
SYNTH_SIGNAL = 3.0
SYNTH_NOISE = 0.5


def synth_dataset(seed: int, n_items: int, grammar_size: int = 4,
                  out_dir=None) -> CaptionDataset:
    """Deterministic feature/caption pairs over a small compositional grammar.

    Captions read "a <color> <shape> <relation> a <color> <shape>". Each of
    the five attributes is written as a one-hot block (amplitude 3.0,
    constant over positions) into a designated level: color-1 into level 1,
    shape-1 into level 2, relation into level 3, and the second object's
    color and shape into level 4, on top of per-position Gaussian noise. A
    linear readout of per-level channel means therefore recovers every
    attribute, and the baseline model (last level only) is blind to the
    first object and the relation.

    With ``out_dir`` set, one OFT file per item plus a ``manifest.json`` are
    written alongside the in-memory dataset.
    """
    if n_items < 1:
        raise ConfigError(f"synthetic dataset needs n_items >= 1, got {n_items}")
    if not 1 <= grammar_size <= len(COLORS):
        raise ConfigError(f"grammar_size must be in [1, {len(COLORS)}], got {grammar_size}")
    g = grammar_size
    rng = np.random.default_rng(seed)
    channels = 2 * g + 8
    items = []
    for k in range(n_items):
        color1, shape1, relation, color2, shape2 = (int(v) for v in rng.integers(0, g, size=5))
        caption = ["a", COLORS[color1], SHAPES[shape1], RELATIONS[relation],
                   "a", COLORS[color2], SHAPES[shape2]]
        levels = []
        for li, n_pos in enumerate(SYNTH_POSITIONS):
            level = rng.normal(0.0, SYNTH_NOISE, size=(n_pos, channels))
            if li == 0:
                level[:, color1] += SYNTH_SIGNAL
            elif li == 1:
                level[:, shape1] += SYNTH_SIGNAL
            elif li == 2:
                level[:, relation] += SYNTH_SIGNAL
            else:
                level[:, color2] += SYNTH_SIGNAL
                level[:, g + shape2] += SYNTH_SIGNAL
            levels.append(level.astype(np.float32))
        items.append(CaptionItem(
            item_id=f"synth{seed}_{k:04d}",
            captions=[caption],
            split="train",
            features=GridFeatureSet(levels),
        ))
    dataset = CaptionDataset(items)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"items": []}
        for item in dataset.items:
            filename = f"{item.item_id}.oft"
            item.features.save(out_dir / filename)
            item.feature_path = str(out_dir / filename)
            manifest["items"].append({
                "id": item.item_id,
                "features": filename,
                "captions": item.captions,
                "split": item.split,
            })
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return dataset
