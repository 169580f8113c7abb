"""Operator surface: train, fine-tune, caption, evaluate, ablate, diagnose.

Exit codes: 0 on success, 2 for usage/config/data/format problems, 3 for
numerical failures. Every command is deterministic given its config and
seed, and file-producing commands list their artifacts in a manifest.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from capsight import checkpoint as ckpt
from capsight import pipeline, viz
from capsight.backbone import GridFeatureSet
from capsight.config import load_run_config
from capsight.data import synth_dataset
from capsight.errors import CapsightError, NumericsError
from capsight.gradsuite import run_gradient_suite
from capsight.metrics import score_report, tokenize
from capsight.model import Captioner


def _write_manifest(out_dir: Path, files: list[str]) -> None:
    doc = {"artifacts": sorted(files)}
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _out_dir(args, run_cfg=None) -> Path:
    out = args.out_dir or (run_cfg.out_dir if run_cfg is not None else None)
    if out is None:
        raise CapsightError("an output directory is required (--out-dir or config out_dir)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    if run_cfg.train["stage"] != "xe":
        raise CapsightError("train runs the cross-entropy stage; config has "
                            f"stage {run_cfg.train['stage']!r} (use finetune-scst)")
    out_dir = _out_dir(args, run_cfg)
    dataset, vocab, model_cfg = pipeline.prepare(run_cfg)
    model = Captioner(model_cfg, np.random.default_rng(run_cfg.seed))
    result, _, ckpt_path = pipeline.run_stage(run_cfg, model, vocab, dataset, out_dir)
    _write_manifest(out_dir, ["xe.ckpt", "xe_log.csv"])
    print(f"trained {result.epoch} epochs / {result.step} steps, "
          f"checkpoint at {ckpt_path}")
    return 0


def cmd_finetune_scst(args) -> int:
    run_cfg = load_run_config(args.config)
    if run_cfg.train["stage"] != "scst":
        raise CapsightError("finetune-scst requires train.stage == 'scst' in the config")
    model, vocab, header, _ = pipeline.load_model(args.checkpoint)
    if ckpt.config_hash(run_cfg.to_dict()) != header["config_hash"]:
        raise CapsightError(
            "checkpoint/config mismatch: the model and dataset sections of the config "
            "do not hash to the checkpoint's config hash"
        )
    out_dir = _out_dir(args, run_cfg)
    dataset, _, _ = pipeline.prepare(run_cfg)
    result, _, ckpt_path = pipeline.run_stage(run_cfg, model, vocab, dataset, out_dir)
    _write_manifest(out_dir, ["scst.ckpt", "scst_log.csv"])
    print(f"fine-tuned {result.epoch} epochs / {result.step} steps, "
          f"checkpoint at {ckpt_path}")
    return 0


def cmd_caption(args) -> int:
    model, vocab, _, _ = pipeline.load_model(args.checkpoint)
    features = GridFeatureSet.load(args.features)
    text, score = model.caption_text(features, vocab, beam=args.beam)
    print(f"{text}\t{score:.6f}")
    return 0


def cmd_eval(args) -> int:
    predictions = json.loads(Path(args.predictions).read_text())
    references = json.loads(Path(args.references).read_text())
    missing = sorted(set(references) - set(predictions))
    extra = sorted(set(predictions) - set(references))
    if missing or extra:
        raise CapsightError(
            f"prediction/reference id mismatch: missing {missing}, unexpected {extra}"
        )
    ids = sorted(references)
    cands = [tokenize(predictions[i]) for i in ids]
    refs = [[tokenize(r) for r in references[i]] for i in ids]
    report = score_report(cands, refs)
    columns = ["B@1", "B@2", "B@3", "B@4", "R", "C"]
    print(",".join(columns))
    print(",".join(f"{report[c]:.6f}" for c in columns))
    if args.out_dir:
        out_dir = _out_dir(args)
        with open(out_dir / "scores.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerow({c: f"{report[c]:.6f}" for c in columns})
        (out_dir / "scores.json").write_text(
            json.dumps({c: report[c] for c in columns}, indent=1, sort_keys=True))
        _write_manifest(out_dir, ["scores.csv", "scores.json"])
    return 0


def _write_rows_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def cmd_ablate(args) -> int:
    run_cfg = load_run_config(args.config)
    out_dir = _out_dir(args, run_cfg)
    if args.sweep_layers:
        rows = pipeline.ablation_sweep_rows(run_cfg, args.sweep_layers)
        name = f"sweep_{args.sweep_layers}.csv"
        _write_rows_csv(out_dir / name, rows, pipeline.SWEEP_COLUMNS)
    else:
        rows = pipeline.ablation_grid_rows(run_cfg)
        name = "ablation.csv"
        _write_rows_csv(out_dir / name, rows, pipeline.ABLATION_COLUMNS)
    _write_manifest(out_dir, [name])
    print(f"wrote {len(rows)} rows to {out_dir / name}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(trials=args.trials, h=args.h, seed=args.seed)
    failed = False
    for name in sorted(results):
        err = results[name]
        status = "PASS" if err < args.tol else "FAIL"
        failed = failed or err >= args.tol
        print(f"{status} {name:18s} max rel err {err:.3e}")
    if failed:
        raise NumericsError("one or more gradient checks exceeded tolerance")
    return 0


def cmd_dump_heatmaps(args) -> int:
    model, vocab, _, _ = pipeline.load_model(args.checkpoint)
    features = GridFeatureSet.load(args.features)
    out_dir = _out_dir(args)
    taps: dict = {}
    model.caption_ids(features, beam=args.beam, taps=taps)
    files: list[str] = []
    if "gate_coefficients" in taps:
        files += viz.export_matrix(out_dir, "gate_coefficients",
                                   taps["gate_coefficients"][None, :])
        files += viz.export_matrix(out_dir, "similarity_input",
                                   viz.cosine_similarity_matrix(taps["gate_input"]))
        files += viz.export_matrix(out_dir, "similarity_gated",
                                   viz.cosine_similarity_matrix(taps["gate_output"]))
    for key in sorted(taps):
        if ".spatial." in key or ".channel." in key or ".cross." in key:
            files += viz.export_matrix(out_dir, key.replace(".", "_"), taps[key])
    _write_manifest(out_dir, files)
    print(f"wrote {len(files)} files to {out_dir}")
    return 0


def cmd_make_synth(args) -> int:
    out_dir = _out_dir(args)
    dataset = synth_dataset(args.seed, args.n_items, args.grammar_size, out_dir=out_dir)
    print(f"wrote {len(dataset)} items and manifest.json to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsight",
        description="Train, run, and inspect the toy one-stage captioner.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the cross-entropy stage from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune-scst", help="self-critical fine-tuning from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_finetune_scst)

    p = sub.add_parser("caption", help="decode one caption from an OFT feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--beam", type=int, default=2)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score a predictions JSON against references "
                                    "(METEOR is out of scope and omitted)")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the module grid or a layer sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--sweep-layers", default=None, metavar="MODE",
                   help="emit the 0..6 layer sweep for one refiner mode instead")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every block")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-heatmaps", help="export gate coefficients, similarity "
                                             "matrices, and attention maps as CSV/PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--beam", type=int, default=2)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dump_heatmaps)

    p = sub.add_parser("make-synth", help="generate a synthetic dataset with OFT files")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-items", type=int, default=16)
    p.add_argument("--grammar-size", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_make_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CapsightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
