"""Command-line entry point: ``mphrl {run,ablate,plot,relearn}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import ConfigError, InvalidInputError
from .config import PRESETS, resolve_config
from .plots import emit_plots
from .runner import ablation_matrix, run_experiment, run_relearn


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--preset", help=f"named preset, one of: {', '.join(sorted(PRESETS))}")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a config field, e.g. hyper.n_actors=8 (repeatable)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mphrl", description="Hierarchical RL with model primitives")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train one configured run")
    _add_common(run)
    abl = sub.add_parser("ablate", help="run a matrix of variants over several seeds")
    _add_common(abl)
    abl.add_argument("--seeds", help="comma-separated seeds (default: run.seeds)")
    abl.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    plot = sub.add_parser("plot", help="render success-rate curves from metrics CSVs")
    plot.add_argument("csv", nargs="+", help="metrics.csv files")
    plot.add_argument("--out", required=True, help="output SVG path")
    plot.add_argument("--group-by", default="variant", choices=("variant", "method"))
    rel = sub.add_parser("relearn", help="relearn earlier tasks from a subpolicy checkpoint")
    _add_common(rel)
    rel.add_argument("--checkpoint", help="checkpoint directory (default: last task under --out)")
    rel.add_argument("--tasks", type=int, default=1, help="number of leading tasks to relearn")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            path = emit_plots([Path(p) for p in args.csv], args.out, group_by=args.group_by)
            print(f"wrote {path}")
            return 0
        cfg = resolve_config(args.config, args.preset, args.seed, args.out, args.override)
        if args.dry_run:
            sys.stdout.write(cfg.to_text())
            return 0
        if args.command == "run":
            records = run_experiment(cfg)
        elif args.command == "ablate":
            seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
            records = ablation_matrix(cfg, seeds=seeds, jobs=args.jobs)
        else:
            steps, original = run_relearn(cfg, args.checkpoint, args.tasks)
            print(f"relearn steps {steps} (original {original})")
            return 0
        for r in records:
            print(f"{r.variant} seed={r.seed} steps={r.task_steps} solved={r.converged}"
                  + (f" error={r.error}" if r.error else ""))
        print(f"wrote {Path(cfg.run.out) / 'summary.txt'}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
