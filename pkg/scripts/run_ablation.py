"""Desk-scale ablation with the default protocol, plus the four directional checks.

Usage: python scripts/run_ablation.py [OUT_DIR] [--ablate.key=value ...]

Pass ``--ablate.standard=false`` for the one-factor sweep over lambda, levels,
components and placements instead of the fixed six-condition set.
"""
import sys

from wavelane.cli import run

if __name__ == "__main__":
    args = sys.argv[1:]
    out = args.pop(0) if args and not args[0].startswith("--") else "runs/ablation"
    sys.exit(run(["-v", "ablate", f"--out={out}"] + args))
