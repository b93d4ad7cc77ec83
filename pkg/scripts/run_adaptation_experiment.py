#!/usr/bin/env python3
"""Teacher-student domain adaptation study: close-talk teacher vs students
adapted on half / all of the unlabeled parallel far-field pairs.

Usage:
    python3 scripts/run_adaptation_experiment.py --seeds 0 1 2 3 4
"""

import argparse
import json
from pathlib import Path

import numpy as np

from farspot.pipeline import AdaptationConfig, adaptation_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--pair-count", type=int, default=80)
    ap.add_argument("--test-count", type=int, default=40)
    ap.add_argument("--out", default=None, help="write a JSON summary here")
    args = ap.parse_args()

    results = []
    for seed in args.seeds:
        r = adaptation_experiment(AdaptationConfig(
            seed=seed, pair_count=args.pair_count, test_count=args.test_count,
        ))
        results.append(r)
        print(
            f"seed {seed}: teacher FER={r['fer_teacher']:.4f}  "
            f"half FER={r['fer_adapted_half']:.4f}  full FER={r['fer_adapted_full']:.4f}"
        )

    def med(key):
        return float(np.median([r[key] for r in results]))

    summary = {k: med(k) for k in ("fer_teacher", "fer_adapted_half", "fer_adapted_full")}
    print("median FER:", "  ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(
            json.dumps({"seeds": args.seeds, "median_fer": summary}, indent=2) + "\n"
        )


if __name__ == "__main__":
    main()
