"""Command-line entry point: ``a2fm <command> [options]``.

Failures exit nonzero after printing one JSON line ``{"error": ..., "message": ...}``
to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ExperimentConfig, dump_config, load_config
from .io import save_artifact

ATTACK_MODES = ("single", "targeted", "universal", "ensemble", "fs")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="overrides dataset, model and attack seeds")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--format", choices=("csv", "json"), help="report format")
    common.add_argument("--models", type=Path, help="directory of checkpoints to load instead of training")

    p = argparse.ArgumentParser(prog="a2fm", description="Appended-frame adversarial attacks on toy video classifiers.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as tensor files")
    sub.add_parser("train", parents=[common], help="train the model zoo and save checkpoints")
    a = sub.add_parser("attack", parents=[common], help="run one attack campaign")
    a.add_argument("mode", choices=ATTACK_MODES)
    sub.add_parser("transfer", parents=[common], help="leave-one-out transfer matrices")
    s = sub.add_parser("sweep", parents=[common], help="sweep one attack setting")
    s.add_argument("kind", choices=harness.SWEEP_KINDS)
    s.add_argument("--grid", help="comma-separated grid values")
    r = sub.add_parser("report", parents=[common], help="re-emit a CSV report as CSV or JSON")
    r.add_argument("input", type=Path)
    sub.add_parser("config", parents=[common], help="print the canonical config")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        s = args.seed
        cfg = cfg.replace(dataset={"seed": s, "eval_seed": s + 1}, model={"seed": s}, attack={"seed": s})
    if args.format:
        cfg = cfg.replace(report={"format": args.format})
    return cfg


def _emit(text: str, out: Path | None, name: str):
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def _grid(kind: str, raw: str | None):
    if raw is None:
        return harness.DEFAULT_GRIDS[kind]
    items = [x.strip() for x in raw.split(",") if x.strip()]
    return items if kind == "pattern" else [float(x) for x in items]


def _zoo(cfg, args, data):
    if args.models:
        return harness.load_zoo(cfg, args.models)
    return harness.train_zoo(cfg, data)[0]


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg = _config(args)
    fmt = cfg.report.format
    timing = cfg.report.include_timing
    if args.command == "config":
        _emit(cfg.to_yaml(), args.out, "config.yaml")
        return 0
    if args.command == "report":
        rows = harness.read_csv_rows(args.input)
        text = json.dumps(rows, indent=1) + "\n" if fmt == "json" else args.input.read_text()
        _emit(text, args.out, f"report.{fmt}")
        return 0
    data, clips = harness.make_data(cfg)
    if args.command == "gen-data":
        out = args.out or Path(cfg.report.out)
        for split in ("train", "test"):
            x, y = data.arrays(split)
            save_artifact(out / f"{split}_x.a2fm", x)
            save_artifact(out / f"{split}_y.a2fm", y.astype(np.float64))
        x = np.stack([c.frames for c in clips])
        save_artifact(out / "eval_x.a2fm", x)
        save_artifact(out / "eval_y.a2fm", np.array([c.label for c in clips], dtype=np.float64))
        dump_config(cfg, out / "config.yaml")
        print(json.dumps({"train": len(data.train_idx), "test": len(data.test_idx), "eval": len(clips), "out": str(out)}))
        return 0
    if args.command == "train":
        out = args.out or Path(cfg.report.out)
        _, reports = harness.train_zoo(cfg, data, out)
        lines = ["model,epochs,train_accuracy,test_accuracy"]
        for kind, r in reports.items():
            lines.append(f"{kind},{r.epochs},{r.train_accuracy!r},{r.test_accuracy!r}")
        _emit("\n".join(lines) + "\n", out, "train.csv")
        return 0
    zoo = _zoo(cfg, args, data)
    if args.command == "attack":
        cfg = cfg.replace(attack={"mode": args.mode})
        if args.mode == "ensemble":
            _, rows = harness.loo_transfer(cfg, zoo, clips)
        elif args.mode == "universal":
            rows = harness.run_universal(cfg, zoo, clips)
        elif args.mode == "fs":
            rows = harness.run_feature_similar(cfg, zoo, clips)
        else:
            rows = harness.run_single(cfg, zoo, clips, targeted=args.mode == "targeted")
        _emit(harness.render(rows, fmt, timing), args.out, f"attack_{args.mode}.{fmt}")
    elif args.command == "transfer":
        matrices, rows = harness.loo_transfer(cfg, zoo, clips)
        _emit(harness.render(rows, fmt, timing), args.out, f"transfer.{fmt}")
    elif args.command == "sweep":
        rows = harness.sweep(args.kind, _grid(args.kind, args.grid), cfg, zoo, clips)
        _emit(harness.render(rows, fmt, timing), args.out, f"sweep_{args.kind}.{fmt}")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit:
        raise
    except Exception as e:  # noqa: BLE001 - every failure becomes one error line
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
