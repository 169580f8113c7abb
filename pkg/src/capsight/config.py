"""Run-configuration JSON: strict schema validation for the CLI.

A run config is a single JSON document with a ``schema_version`` field and
``model``, ``train``, and ``dataset`` sections. Unknown keys anywhere are
rejected so typos in ablation sweeps fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from capsight.errors import ConfigError

SCHEMA_VERSION = 1

MODEL_KEYS = {
    "d_model": 64,
    "heads": 2,
    "decoder_layers": 1,
    "d_ff": None,
    "refine_mode": "cascade",
    "refine_layers": 1,
    "channel_heads": 1,
    "use_gate": True,
    "gate_bottleneck": None,
    "learnable_squeeze": False,
    "l_max": 16,
}

TRAIN_KEYS = {
    "stage": "xe",
    "epochs": 15,
    "max_steps": None,
    "batch_size": 4,
    "base_lr": None,
    "warmup_steps": 100,
    "decay_factor": 0.1,
    "decay_start_epoch": 9,
    "scst_decay_every": 3,
    "ss_increment": 0.05,
    "ss_every": 3,
    "scst_samples": 5,
    "scst_baseline": "mean",
    "grad_clip": 5.0,
    "vocab_min_count": 0,
}

DATASET_KEYS_BY_TYPE = {
    "synthetic": {"seed": 42, "n_items": 16, "grammar_size": 4},
    "karpathy": {"json": None, "features_dir": None, "features_ext": ".oft"},
    "manifest": {"path": None},
}

TOP_KEYS = ("schema_version", "seed", "out_dir", "model", "train", "dataset")


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _merged(section: dict, defaults: dict, where: str) -> dict:
    _check_keys(section, defaults, where)
    merged = dict(defaults)
    merged.update(section)
    return merged


@dataclass
class RunConfig:
    seed: int = 42
    out_dir: str = "out"
    model: dict = field(default_factory=lambda: dict(MODEL_KEYS))
    train: dict = field(default_factory=lambda: dict(TRAIN_KEYS))
    dataset: dict = field(default_factory=lambda: {"type": "synthetic",
                                                   **DATASET_KEYS_BY_TYPE["synthetic"]})

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "model": dict(self.model),
            "train": dict(self.train),
            "dataset": dict(self.dataset),
        }


def parse_run_config(doc: dict, where: str = "config") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    _check_keys(doc, TOP_KEYS, where)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{where}.schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    seed = doc.get("seed", 42)
    if not isinstance(seed, int):
        raise ConfigError(f"{where}.seed: expected an integer, got {seed!r}")
    out_dir = doc.get("out_dir", "out")
    model = _merged(doc.get("model", {}), MODEL_KEYS, f"{where}.model")
    train = _merged(doc.get("train", {}), TRAIN_KEYS, f"{where}.train")

    dataset_doc = dict(doc.get("dataset", {"type": "synthetic"}))
    ds_type = dataset_doc.pop("type", "synthetic")
    if ds_type not in DATASET_KEYS_BY_TYPE:
        raise ConfigError(
            f"{where}.dataset.type: unknown type {ds_type!r}, "
            f"expected one of {sorted(DATASET_KEYS_BY_TYPE)}"
        )
    dataset = _merged(dataset_doc, DATASET_KEYS_BY_TYPE[ds_type], f"{where}.dataset")
    dataset["type"] = ds_type
    for key, value in dataset.items():
        if value is None and key != "features_dir":
            raise ConfigError(f"{where}.dataset.{key}: required for type {ds_type!r}")
    return RunConfig(seed=seed, out_dir=out_dir, model=model, train=train, dataset=dataset)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_run_config(doc, where=str(path))
