#!/usr/bin/env python3
"""Run the single-factor-change ablation ladder for far-field adaptation.

Usage:
    python3 scripts/run_ladder.py --out runs/ladder --seed 0
"""

import argparse

from farspot.pipeline import LadderConfig, ablation_ladder


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-count", type=int, default=60)
    ap.add_argument("--extra-count", type=int, default=60)
    ap.add_argument("--test-count", type=int, default=40)
    ap.add_argument("--out", default=None, help="directory for checkpoints and reports")
    args = ap.parse_args()

    report = ablation_ladder(LadderConfig(
        seed=args.seed, train_count=args.train_count, extra_count=args.extra_count,
        test_count=args.test_count, out_dir=args.out,
    ))
    print(report.format_text())


if __name__ == "__main__":
    main()
