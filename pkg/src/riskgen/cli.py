"""Command line entry point: ``python3 -m riskgen <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .pipeline import SWEEP_AXES, RunConfig, ablate, run_experiment, sweep

STAGE_ORDER = ("data", "train", "generate", "eval", "retrain")


def _global(p):
    p.add_argument("--config", type=Path, help="run config JSON (defaults used if omitted)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, help="run directory (overrides the config)")
    p.add_argument("--resume", action="store_true",
                   help="reuse cached stage outputs in the run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskgen", description="risky-sample generation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "data": "build and save the synthetic dataset",
        "train": "train embedder, denoiser, target classifiers and error predictor",
        "generate": "generate risky samples",
        "eval": "evaluate generated samples (error rate, Frechet distance, conformity, transfer)",
        "retrain": "augment the training set and retrain the target model",
    }
    for name in STAGE_ORDER:
        _global(sub.add_parser(name, help=helps[name]))
    p = sub.add_parser("sweep", help="sweep one guidance or data hyperparameter")
    _global(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated, ascending")
    _global(sub.add_parser("ablate", help="Base / Screening / Gradient / Both arms"))
    p = sub.add_parser("report", help="print the run manifest and reports")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    return cfg


def _report(out: Path) -> int:
    man = out / "manifest.json"
    if not man.exists():
        print(f"no run found in {out}", file=sys.stderr)
        return 1
    rec = json.loads(man.read_text())
    print(f"run {rec['run_id']}  config {rec['config_hash']}")
    for name, st in rec["stages"].items():
        print(f"  {name:<9} {'done' if st['done'] else 'pending'}")
    if rec.get("error"):
        print(f"  failed: {rec['error']}")
    for k, v in rec.get("metrics", {}).items():
        print(f"  {k}: {json.dumps(v, sort_keys=True)}")
    for f in sorted((out / "reports").glob("*.csv")):
        print(f"\n{f.name}")
        print(f.read_text().rstrip())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return _report(args.out)
    try:
        cfg = load_config(args)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    if args.command in STAGE_ORDER:
        stages = STAGE_ORDER[:STAGE_ORDER.index(args.command) + 1]
        rec = run_experiment(cfg, resume=args.resume, stages=stages)
        print(json.dumps(rec.metrics, indent=2, sort_keys=True) if rec.metrics else f"done: {cfg.out}")
    elif args.command == "sweep":
        try:
            values = [float(v) for v in args.values.split(",")]
            rows = sweep(cfg, args.axis, values, resume=args.resume)
        except ValueError as exc:
            print(f"sweep: {exc}", file=sys.stderr)
            return 2
        for r in rows:
            print(f"{args.axis}={r[args.axis]:g}  error={r['error_rate']:.3f}  "
                  f"conformity={r['conformity_rate']:.3f}  frechet={r['frechet_distance']:.3f}")
    elif args.command == "ablate":
        res = ablate(cfg, resume=args.resume)
        for arm, r in res.items():
            print(f"{arm:<10} error={r['error_rate']:.3f}±{r['error_rate_sd']:.3f}  "
                  f"conformity={r['conformity_rate']:.3f}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
