"""Glue between configs, datasets, models, training, and checkpoints."""

from __future__ import annotations

import copy
import csv
from pathlib import Path

import numpy as np

from capsight import checkpoint as ckpt
from capsight.config import RunConfig
from capsight.data import (CaptionDataset, Vocabulary, build_vocab, decode_tokens,
                           load_karpathy_json, load_manifest, synth_dataset)
from capsight.decoder import greedy_decode
from capsight.errors import ConfigError, DataError
from capsight.metrics import score_report
from capsight.model import Captioner, ModelConfig
from capsight.nn.tensor import no_grad
from capsight.training import Adam, TrainConfig, TrainResult, train

LOG_COLUMNS = ["epoch", "step", "lr", "loss", "loss_sum", "cider_d", "baseline"]


def build_dataset(ds_cfg: dict) -> CaptionDataset:
    kind = ds_cfg["type"]
    if kind == "synthetic":
        return synth_dataset(ds_cfg["seed"], ds_cfg["n_items"], ds_cfg["grammar_size"])
    if kind == "karpathy":
        return load_karpathy_json(ds_cfg["json"], ds_cfg["features_dir"], ds_cfg["features_ext"])
    if kind == "manifest":
        return load_manifest(ds_cfg["path"])
    raise ConfigError(f"unknown dataset type {kind!r}")


def prepare(run_cfg: RunConfig) -> tuple[CaptionDataset, Vocabulary, ModelConfig]:
    """Build the dataset, derive the vocabulary, and fix the model shape."""
    dataset = build_dataset(run_cfg.dataset)
    train_items = dataset.split("train")
    if not train_items:
        raise DataError("dataset has no training items")
    vocab = build_vocab(dataset.all_captions("train"), run_cfg.train["vocab_min_count"])
    features = train_items[0].grid_features()
    model_cfg = ModelConfig(
        vocab_size=len(vocab),
        level_widths=features.channel_widths,
        positions=features.coarse_positions,
        **run_cfg.model,
    )
    return dataset, vocab, model_cfg


def train_config_of(run_cfg: RunConfig) -> TrainConfig:
    keys = dict(run_cfg.train)
    keys.pop("vocab_min_count")
    return TrainConfig(seed=run_cfg.seed, **keys)


def write_log_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({key: row.get(key, "") for key in LOG_COLUMNS})


def save_model(path, model: Captioner, vocab: Vocabulary, run_cfg_doc: dict,
               stage: str, epoch: int, step: int, optimizer: Adam | None = None) -> None:
    header = {
        "config": run_cfg_doc,
        "config_hash": ckpt.config_hash(run_cfg_doc),
        "model_config": model.cfg.to_dict(),
        "vocab": vocab.to_json(),
        "stage": stage,
        "epoch": epoch,
        "step": step,
        "adam_t": optimizer.t if optimizer is not None else 0,
    }
    params = [(name, p.data) for name, p in model.named_parameters()]
    if optimizer is not None:
        m, v, _ = optimizer.state_arrays()
        moments_m = [(name, m[name]) for name, _ in optimizer.named_params]
        moments_v = [(name, v[name]) for name, _ in optimizer.named_params]
    else:
        moments_m = moments_v = []
    ckpt.save_checkpoint(path, params, header, moments_m, moments_v)


def load_model(path) -> tuple[Captioner, Vocabulary, dict, dict]:
    """Rebuild a captioner from a checkpoint; returns (model, vocab, header, raw)."""
    doc = ckpt.load_checkpoint(path)
    header = doc["header"]
    model = Captioner(ModelConfig.from_dict(header["model_config"]))
    for name, param in model.named_parameters():
        if name not in doc["params"]:
            raise DataError(f"checkpoint is missing parameter {name!r}")
        stored = doc["params"][name]
        if stored.shape != param.data.shape:
            raise DataError(
                f"checkpoint parameter {name!r} has shape {stored.shape}, "
                f"model expects {param.data.shape}"
            )
        param.data = stored.astype(param.data.dtype)
    vocab = Vocabulary.from_json(header["vocab"])
    return model, vocab, header, doc


def restore_optimizer(model: Captioner, doc: dict) -> Adam:
    optimizer = Adam(list(model.named_parameters()))
    if doc["moments_m"]:
        optimizer.load_state(doc["moments_m"], doc["moments_v"], doc["header"]["adam_t"])
    return optimizer


def run_stage(run_cfg: RunConfig, model: Captioner, vocab: Vocabulary,
              dataset: CaptionDataset, out_dir=None,
              optimizer: Adam | None = None, start_epoch: int = 1,
              start_step: int = 0) -> tuple[TrainResult, Adam, str | None]:
    """Train one stage, writing the log CSV and a checkpoint per epoch."""
    cfg = train_config_of(run_cfg)
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / f"{cfg.stage}.ckpt"

    def on_epoch_end(epoch, step, opt):
        if ckpt_path is not None:
            save_model(ckpt_path, model, vocab, run_cfg.to_dict(), cfg.stage,
                       epoch, step, opt)

    result, optimizer = train(model, vocab, dataset, cfg, optimizer=optimizer,
                              start_epoch=start_epoch, start_step=start_step,
                              on_epoch_end=on_epoch_end)
    if out_dir is not None:
        write_log_csv(out_dir / f"{cfg.stage}_log.csv", result.history)
        save_model(ckpt_path, model, vocab, run_cfg.to_dict(), cfg.stage,
                   result.epoch, result.step, optimizer)
    return result, optimizer, str(ckpt_path) if ckpt_path else None


def greedy_captions(model: Captioner, vocab: Vocabulary, items) -> list[list[str]]:
    captions = []
    for item in items:
        with no_grad():
            memory = model.encode(item.grid_features())
        ids = greedy_decode(model.decoder, memory)
        captions.append(decode_tokens(ids, vocab))
    return captions


def evaluate_items(model: Captioner, vocab: Vocabulary, items) -> dict:
    """Greedy-decode every item and score against its references."""
    predictions = greedy_captions(model, vocab, items)
    references = [item.captions for item in items]
    return score_report(predictions, references)


# -- ablation ------------------------------------------------------------------------

ABLATION_GRID = [
    ("baseline", False, "none"),
    ("gate", True, "none"),
    ("spatial", False, "spatial"),
    ("channel", False, "channel"),
    ("parallel", False, "parallel"),
    ("cascade", False, "cascade"),
    ("gate+spatial", True, "spatial"),
    ("gate+channel", True, "channel"),
    ("gate+parallel", True, "parallel"),
    ("gate+cascade", True, "cascade"),
]

ABLATION_COLUMNS = ["row", "gate", "spatial", "channel", "parallel", "cascade",
                    "B@1", "B@2", "B@3", "B@4", "R", "C"]
SWEEP_COLUMNS = ["layers", "B@1", "B@2", "B@3", "B@4", "R", "C"]


def _run_variant(run_cfg: RunConfig, dataset, vocab) -> dict:
    features = dataset.split("train")[0].grid_features()
    model_cfg = ModelConfig(
        vocab_size=len(vocab),
        level_widths=features.channel_widths,
        positions=features.coarse_positions,
        **run_cfg.model,
    )
    model = Captioner(model_cfg, np.random.default_rng(run_cfg.seed))
    train(model, vocab, dataset, train_config_of(run_cfg))
    return evaluate_items(model, vocab, dataset.split("train"))


def ablation_grid_rows(run_cfg: RunConfig, rows=None) -> list[dict]:
    """The ten-row module grid: baseline, gate only, four refiner modes
    alone, and four refiner modes on top of the gate."""
    dataset, vocab, _ = prepare(run_cfg)
    selected = ABLATION_GRID if rows is None else [r for r in ABLATION_GRID if r[0] in rows]
    out = []
    for name, use_gate, mode in selected:
        variant = copy.deepcopy(run_cfg)
        variant.model["use_gate"] = use_gate
        variant.model["refine_mode"] = mode
        report = _run_variant(variant, dataset, vocab)
        row = {"row": name, "gate": int(use_gate)}
        for m in ("spatial", "channel", "parallel", "cascade"):
            row[m] = int(mode == m)
        row.update({key: report[key] for key in ("B@1", "B@2", "B@3", "B@4", "R", "C")})
        out.append(row)
    return out


def ablation_sweep_rows(run_cfg: RunConfig, mode: str, max_layers: int = 6) -> list[dict]:
    """Layer-count sweep (0..max_layers) for one refiner mode."""
    dataset, vocab, _ = prepare(run_cfg)
    out = []
    for n in range(max_layers + 1):
        variant = copy.deepcopy(run_cfg)
        variant.model["refine_mode"] = mode
        variant.model["refine_layers"] = n
        report = _run_variant(variant, dataset, vocab)
        row = {"layers": n}
        row.update({key: report[key] for key in ("B@1", "B@2", "B@3", "B@4", "R", "C")})
        out.append(row)
    return out
