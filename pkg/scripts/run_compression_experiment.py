#!/usr/bin/env python3
"""Desk-scale KWS compression study: CTC teacher vs hard-label student vs
distilled student, compared by FA at the 96%-CA operating point.

Usage:
    python3 scripts/run_compression_experiment.py --seeds 0 1 2 --out runs/compression
"""

import argparse
import json
from pathlib import Path

import numpy as np

from farspot.pipeline import KwsCompressionConfig, kws_compression_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default=None, help="directory for checkpoints/scores/reports")
    ap.add_argument("--train-count", type=int, default=2000)
    ap.add_argument("--test-count", type=int, default=1000)
    ap.add_argument("--target-ca", type=float, default=0.96)
    args = ap.parse_args()

    results = []
    for seed in args.seeds:
        out_dir = None
        if args.out is not None:
            out_dir = str(Path(args.out) / f"seed{seed}")
        cfg = KwsCompressionConfig(
            seed=seed, train_count=args.train_count, test_count=args.test_count,
            target_ca=args.target_ca, out_dir=out_dir,
        )
        r = kws_compression_experiment(cfg)
        results.append(r)
        print(f"seed {seed}: " + "  ".join(
            f"{name} FA={r[name]['fa']:.4f}"
            for name in ("teacher", "hard_student", "distilled_student")
        ))

    def med(name):
        return float(np.median([r[name]["fa"] for r in results]))

    summary = {name: med(name) for name in ("teacher", "hard_student", "distilled_student")}
    print("median FA:", "  ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "summary.json").write_text(
            json.dumps({"seeds": args.seeds, "median_fa": summary}, indent=2) + "\n"
        )


if __name__ == "__main__":
    main()
