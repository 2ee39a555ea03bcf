"""Command-line runner: ``noisealign <subcommand> [--config PATH] [--out DIR] [--seed N] [--quiet]``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import EXPERIMENTS, ConfigError, default_config, load_config
from .experiments import RUNNERS
from .io import write_manifest

HELP = {
    "sample": "draw base-model samples",
    "align": "run one alignment method per seed",
    "dpo": "preference-based optimization on a non-differentiable reward",
    "drift-curve": "MIRA vs DNO drift and reward over iterations",
    "beta-sweep": "final reward and drift across regularization weights",
    "reward-vs-steps": "final reward across sampling step counts",
    "prop1": "AR(1) closed-form KL against simulation",
    "check-grads": "reverse-mode gradients against finite differences",
    "mmd": "MMD between base samples and aligned samples",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisealign", description="Toy noise-optimization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", type=Path, help="INI config file (defaults apply to missing keys)")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<subcommand>)")
        p.add_argument("--seed", type=int, default=None, help="run only this seed")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    kind = args.command
    config = load_config(args.config, kind) if args.config else default_config(kind)
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    out = args.out or Path("runs") / kind
    out.mkdir(parents=True, exist_ok=True)
    stale = out / "manifest.json"
    if stale.exists():
        stale.unlink()
    start = time.perf_counter()
    result = RUNNERS[kind](config, out)
    result.timings["total"] = time.perf_counter() - start
    write_manifest(out, config.to_dict(), config.seeds, result.timings, result.files,
                   {"command": kind, "passed": result.passed})
    if not args.quiet:
        for line in result.lines:
            print(line)
        print(f"outputs in {out}")
    return 0 if result.passed else 1


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except (ConfigError, ValueError, TypeError, OSError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
