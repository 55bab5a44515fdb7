"""Command-line entry point: ``davgswt <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

from ..errors import DavError
from .config import ExperimentConfig, load_config
from .experiments import SWEEP_PARAMS, run_experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="davgswt", description="Active-view Gaussian-splat Wang-tile pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value or JSON configuration file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("reconstruct", parents=[common], help="active reconstruction of the synthetic scene")
    sub.add_parser("tiles", parents=[common], help="build the Wang tile set and a stochastic tiling")
    r = sub.add_parser("render", parents=[common], help="render a camera path over the tiled world")
    r.add_argument("--frames", type=int)
    r.add_argument("--path", choices=["circle"], default="circle")
    a = sub.add_parser("ablate", parents=[common], help="six-variant ablation over paired seeds")
    a.add_argument("--seeds", type=int)
    s = sub.add_parser("sweep", parents=[common], help="one-parameter sensitivity sweep")
    s.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    sub.add_parser("budget-curve", parents=[common], help="quality versus captured views")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg: ExperimentConfig = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "frames", None) is not None:
            overrides["frames"] = args.frames
        if getattr(args, "seeds", None) is not None:
            overrides["seeds"] = args.seeds
        if overrides:
            cfg = cfg.with_(**overrides)
    except (DavError, OSError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    kind = args.command.replace("-", "_")
    kwargs = {"param": args.param} if kind == "sweep" else {}
    try:
        record = run_experiment(cfg, kind, args.out, **kwargs)
    except Exception as exc:  # the error manifest is already on disk
        print(f"{kind} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for key, value in sorted(record.get("metrics", {}).items()):
        print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
