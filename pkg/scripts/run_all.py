"""Run every shipped experiment config through the CLI.

    python3 scripts/run_all.py [--out out] [--skip-6d]
"""
import argparse
import sys
from pathlib import Path

from sbmhe.cli import main

CONFIGS = Path(__file__).resolve().parent / "configs"

PLAN = [
    ("analyze-linear", ["oscillator_analysis", "hurwitz_analysis"]),
    ("check-certificates", ["oscillator_certificates", "oscillator_adversarial"]),
    ("simulate", ["linear2d", "benchmark6d"]),
    ("estimate", ["linear2d_noisefree", "linear2d", "benchmark6d"]),
]


def run(out: str, skip_6d: bool) -> int:
    code = 0
    for verb, names in PLAN:
        names = [n for n in names if not (skip_6d and n == "benchmark6d" and verb == "estimate")]
        args = [verb, "--out", str(Path(out) / verb), "--workers", str(min(len(names), 2))]
        for n in names:
            args += ["--config", str(CONFIGS / f"{n}.json")]
        print(f"== sbmhe {verb}: {', '.join(names)}", flush=True)
        code = max(code, main(args))
    return code


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out")
    ap.add_argument("--skip-6d", action="store_true", help="skip the slow six-state estimation run")
    a = ap.parse_args()
    sys.exit(run(a.out, a.skip_6d))
