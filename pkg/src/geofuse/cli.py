"""Command-line entry point.

Subcommands: pilot, ablate, train, eval, report.  All randomness derives
from --seed (or the config's seed), so a repeated invocation writes
byte-identical report files.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .bench import CorruptionMode, evaluate_policy, make_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import GeofuseError
from .rng import RngStream
from .runner import (
    ABLATION_KINDS,
    RunRecord,
    emit_table,
    loss_curves_csv,
    pilot_configs,
    records_to_rows,
    run_ablation,
    run_pilot,
    run_single,
)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_run(out: Path, record: RunRecord, policy, cfg: ExperimentConfig):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    (out / "record.json").write_text(record.to_json() + "\n")
    (out / "loss.csv").write_text(loss_curves_csv([record]))
    if policy is not None:
        save_checkpoint(policy, cfg, out / "checkpoint.bin")


def _write_report(out: Path, records, fmt: str):
    out.mkdir(parents=True, exist_ok=True)
    ext = "md" if fmt == "markdown" else "csv"
    (out / f"report.{ext}").write_text(emit_table(records_to_rows(records), fmt))
    (out / "loss_curves.csv").write_text(loss_curves_csv(records))
    for i, rec in enumerate(records):
        (out / f"record_{i:02d}.json").write_text(rec.to_json() + "\n")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    record, policy = run_single(cfg, return_policy=True)
    out = Path(args.out)
    _write_run(out, record, policy, cfg)
    m = record.metrics["reach"]
    print(f"trained {cfg.scheme} ({cfg.arch}): "
          f"success={m['success_rate']:.3f} l2={m['mean_l2_error']:.4f}")
    return 0


def cmd_eval(args) -> int:
    policy, cfg = load_checkpoint(args.checkpoint)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    episodes = make_dataset(RngStream(cfg.seed, 40), cfg.eval_episodes,
                            cfg.n_objects, cfg.n_patches, cfg.horizon,
                            cfg.d_action, split="eval")
    corruption = CorruptionMode(args.corruption or cfg.corruption, cfg.corruption_sigma)
    m = evaluate_policy(policy, episodes, RngStream(cfg.seed, 41), corruption)
    print(f"success_rate={m.success_rate:.4f} mean_l2_error={m.mean_l2_error:.4f} "
          f"n={m.n_episodes}")
    return 0


def cmd_pilot(args) -> int:
    cfg = _load_config(args)
    records = run_pilot(pilot_configs(cfg), jobs=args.jobs)
    _write_report(Path(args.out), records, args.format)
    print(emit_table(records_to_rows(records), args.format))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    records = run_ablation(args.kind, cfg, jobs=args.jobs)
    _write_report(Path(args.out), records, args.format)
    print(emit_table(records_to_rows(records), args.format))
    return 0


def cmd_report(args) -> int:
    paths = sorted(Path(args.records).glob("record*.json"))
    if not paths:
        raise GeofuseError(f"no record files under {args.records}")
    records = [RunRecord.from_json(p.read_text()) for p in paths]
    text = emit_table(records_to_rows(records), args.format)
    out = Path(args.out) if args.out else Path(args.records)
    ext = "md" if args.format == "markdown" else "csv"
    (out / f"report.{ext}").write_text(text)
    (out / "loss_curves.csv").write_text(loss_curves_csv(records))
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geofuse",
                                 description="gated geometric fusion lab")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
        p.add_argument("--jobs", type=int, default=1)

    common(sub.add_parser("pilot", help="train+eval the base model and all nine schemes"))
    p = sub.add_parser("ablate", help="run one ablation axis")
    p.add_argument("--kind", choices=ABLATION_KINDS, required=True)
    common(p)
    common(sub.add_parser("train", help="train a single configuration"))
    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--corruption", choices=("none", "zeros", "gaussian"))
    p = sub.add_parser("report", help="re-emit tables from saved records")
    p.add_argument("--records", required=True, help="directory of record*.json files")
    p.add_argument("--out")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    return ap


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "pilot": cmd_pilot,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return COMMANDS[args.command](args)
    except GeofuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
