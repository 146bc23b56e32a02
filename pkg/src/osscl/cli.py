"""Command-line entry points.

Subcommands wire the library into file-level workflows:

* ``osscl synth``   generate a deterministic synthetic corpus
* ``osscl train``   train a model from a config and a corpus root
* ``osscl eval``    score a test split and write metric reports
* ``osscl score``   score a single WAV against a claimed machine ID
* ``osscl ablate-fph``  sweep perturbation-head reductions

Every run that produces artifacts writes ``effective_config.json`` with
all resolved values next to them.  Exit code 0 means every artifact was
written and all metrics are finite; input and usage problems exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    load_config,
    parse_override_value,
)
from .corpus import ClipMetadata, CorpusError, load_clip, scan_dataset, synth_generate
from .evaluation import anomaly_score, evaluate, write_scores_csv
from .model import load_checkpoint
from .training import TrainingDivergedError, train

_USAGE_ERRORS = (ConfigError, CorpusError, ValueError, KeyError, FileNotFoundError, NotADirectoryError)


def _write_effective_config(out_dir: Path, run: RunConfig | None, command: str, extras: dict) -> None:
    doc = {"command": command, **extras}
    if run is not None:
        doc["config"] = run.resolved().to_dict()
    (out_dir / "effective_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _resolve_run_config(args) -> RunConfig:
    run = load_config(args.config) if args.config else RunConfig()
    overrides: dict[str, object] = {}
    for item in getattr(args, "set", None) or []:
        dotted, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[dotted.strip()] = parse_override_value(value)
    if getattr(args, "feature", None):
        overrides["train.feature_mode"] = args.feature
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        overrides["train.batch_size"] = args.batch_size
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    elif args.config is None and "OSSCL_SEED" in os.environ:
        overrides["train.seed"] = int(os.environ["OSSCL_SEED"])
    if overrides:
        run = apply_overrides(run, overrides)
    return run


def _require_data_root(args) -> Path:
    root = Path(args.data_root)
    if not root.is_dir():
        raise CorpusError(f"data root does not exist: {root}")
    return root


def cmd_train(args) -> int:
    run = _resolve_run_config(args)
    root = _require_data_root(args)
    manifest = scan_dataset(root)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_effective_config(
        out_dir, run, "train", {"data_root": str(root), "num_classes": manifest.num_classes}
    )
    ckpt = train(manifest, run, out_dir)
    manifest.save(out_dir / "manifest.json")
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint, weights=args.weights)
    root = _require_data_root(args)
    manifest = scan_dataset(root)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report, scored = evaluate(model, meta["class_map"], manifest, batch_size=args.batch_size)

    write_scores_csv(out_dir / "scores.csv", scored)
    report.write_csv(out_dir / "report.csv")
    report.write_json(out_dir / "report.json")
    _write_effective_config(
        out_dir,
        None,
        "eval",
        {
            "checkpoint": str(args.checkpoint),
            "weights": args.weights,
            "data_root": str(root),
            "train_meta": {k: v for k, v in meta.items() if k in ("train", "contrastive", "steps")},
        },
    )
    print(report.format_table())
    values = [report.auc, report.pauc, report.mauc]
    if not all(np.isfinite(v) for v in values):
        raise ValueError(f"non-finite metrics: {values}")
    return 0


def cmd_score(args) -> int:
    model, meta = load_checkpoint(args.checkpoint, weights=args.weights)
    machine_type, _, id_text = args.id.partition("/")
    if not machine_type or not id_text:
        raise ValueError(f"--id must look like machine_type/number, got {args.id!r}")
    try:
        machine_id = int(id_text)
    except ValueError:
        raise ValueError(f"machine id must be an integer, got {id_text!r}") from None
    if (machine_type, machine_id) not in meta["class_map"]:
        raise KeyError(f"unknown machine id {machine_type}/{machine_id} for this checkpoint")

    wav = Path(args.wav)
    if not wav.is_file():
        raise FileNotFoundError(f"wav file not found: {wav}")
    clip_meta = ClipMetadata(machine_type, machine_id, "normal", "test", wav)
    score = anomaly_score(model, meta["class_map"], load_clip(clip_meta))
    print(f"{score:.9g}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "score.txt").write_text(f"{score:.9g}\n")
        _write_effective_config(
            out_dir, None, "score",
            {"checkpoint": str(args.checkpoint), "wav": str(wav), "id": args.id},
        )
    return 0


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    manifest = synth_generate(
        n_ids=args.ids,
        clips_per_id=args.clips_per_id,
        seed=args.seed,
        out=out_dir,
        test_clips_per_id=args.test_clips_per_id,
    )
    manifest.save(out_dir / "manifest.json")
    _write_effective_config(
        out_dir,
        None,
        "synth",
        {
            "ids": args.ids,
            "clips_per_id": args.clips_per_id,
            "test_clips_per_id": args.test_clips_per_id,
            "seed": args.seed,
            "num_classes": manifest.num_classes,
            "num_clips": len(manifest.clips),
        },
    )
    print(f"wrote {len(manifest.clips)} clips for {manifest.num_classes} ids under {out_dir}")
    return 0


def _parse_reductions(text: str) -> list[int | None]:
    values: list[int | None] = []
    for token in text.split(","):
        token = token.strip()
        if token == "none":
            values.append(None)
            continue
        try:
            r = int(token)
        except ValueError:
            raise ValueError(f"bad reduction {token!r}: expected 'none' or an integer") from None
        if r < 1:
            raise ValueError(f"reduction must be >= 1, got {r}")
        values.append(r)
    if not values:
        raise ValueError("empty reduction list")
    return values


def cmd_ablate_fph(args) -> int:
    reductions = _parse_reductions(args.reductions)
    run = _resolve_run_config(args)
    root = _require_data_root(args)
    manifest = scan_dataset(root)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    columns: dict[str, dict[str, float]] = {}
    labels = ["none" if r is None else str(r) for r in reductions]
    for r, label in zip(reductions, labels):
        sweep_run = dataclasses.replace(
            run, fph=dataclasses.replace(run.fph, reduction=r)
        )
        sweep_dir = out_dir / f"reduction_{label}"
        ckpt = train(manifest, sweep_run, sweep_dir)
        model, meta = load_checkpoint(ckpt, weights=args.weights)
        report, _ = evaluate(model, meta["class_map"], manifest)
        columns[label] = {t.machine_type: t.auc for t in report.types}
        columns[label]["average"] = report.auc

    types = [t for t in sorted({k for col in columns.values() for k in col}) if t != "average"]
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        fh.write("machine_type," + ",".join(labels) + "\n")
        for mtype in types + ["average"]:
            row = [f"{columns[label][mtype]:.6f}" for label in labels]
            fh.write(f"{mtype}," + ",".join(row) + "\n")
    _write_effective_config(
        out_dir, run, "ablate-fph",
        {"data_root": str(root), "reductions": labels, "weights": args.weights},
    )
    print(f"ablation table written to {out_dir / 'ablation.csv'}")
    return 0


def _add_config_args(p: argparse.ArgumentParser, with_train_flags: bool = True) -> None:
    p.add_argument("--config", help="config JSON path or bundled preset name")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    if with_train_flags:
        p.add_argument("--feature", choices=["logmel", "tfst"], help="override feature mode")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osscl",
        description="Machine-ID self-supervised anomalous sound detection toolkit",
    )
    parser.add_argument("--version", action="version", version=f"osscl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", choices=["raw", "ema"], default="ema")
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score a single WAV against a claimed machine id")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--id", required=True, help="claimed id, e.g. fan/1")
    p.add_argument("--weights", choices=["raw", "ema"], default="ema")
    p.add_argument("--out", help="optional output directory for the score artifact")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, required=True)
    p.add_argument("--clips-per-id", type=int, required=True, dest="clips_per_id")
    p.add_argument("--test-clips-per-id", type=int, default=None, dest="test_clips_per_id")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate-fph", help="sweep perturbation-head reductions")
    _add_config_args(p)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reductions", required=True, help="comma list, e.g. none,128,64,4")
    p.add_argument("--weights", choices=["raw", "ema"], default="ema")
    p.set_defaults(func=cmd_ablate_fph)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        msg = exc.args[0] if exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
