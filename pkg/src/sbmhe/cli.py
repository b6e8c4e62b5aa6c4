"""Command-line front end: ``sbmhe <verb> --config PATH [--config PATH ...]``."""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .core import DivergenceError
from .runner import COMMANDS

EXIT_OK, EXIT_FAILURE, EXIT_VALIDATION, EXIT_NONCONVERGED = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbmhe", description="Sample-based MHE experiments.")
    parser.add_argument("verb", choices=sorted(COMMANDS))
    parser.add_argument("--config", action="append", required=True, metavar="PATH",
                        help="experiment config (JSON); repeat for several independent runs")
    parser.add_argument("--out", default="out", metavar="DIR", help="output root (default: out)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=1, help="parallel runs (default: 1)")
    parser.add_argument("--quiet", action="store_true", help="print nothing on success")
    parser.add_argument("--strict", action="store_true",
                        help="exit 3 if any horizon problem did not converge")
    return parser


def _run_one(verb: str, cfg: ExperimentConfig, out_root: str) -> dict:
    out = Path(cfg.out) if cfg.out else Path(out_root) / cfg.name
    try:
        return {"name": cfg.name, "ok": True, **COMMANDS[verb](cfg, out)}
    except ConfigError as exc:
        return {"name": cfg.name, "ok": False, "code": EXIT_VALIDATION, "error": str(exc)}
    except DivergenceError as exc:
        return {"name": cfg.name, "ok": False, "code": EXIT_FAILURE, "error": str(exc)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    configs = []
    for path in args.config:
        try:
            cfg = load_config(path)
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
        except ConfigError as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        configs.append(cfg)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        print("error: configs must have distinct names (one output directory each)", file=sys.stderr)
        return EXIT_VALIDATION
    if args.workers == 1 or len(configs) == 1:
        results = [_run_one(args.verb, c, args.out) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_run_one, [args.verb] * len(configs), configs, [args.out] * len(configs)))
    code = EXIT_OK
    for res in results:
        if not res["ok"]:
            print(f"error: {res['name']}: {res['error']}", file=sys.stderr)
            code = max(code, res["code"])
        elif not args.quiet:
            print(json.dumps(res, sort_keys=True))
        if res["ok"] and args.strict and res.get("all_converged") is False:
            print(f"error: {res['name']}: some horizon problems did not converge", file=sys.stderr)
            code = max(code, EXIT_NONCONVERGED)
    return code


if __name__ == "__main__":
    sys.exit(main())
