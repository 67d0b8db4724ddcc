#!/usr/bin/env python3
"""Synthesize a world, train every method, evaluate every task, print a summary.

    python scripts/run_pipeline.py --config configs/synthetic.ini --out out
"""

import argparse
import os
import sys
from collections import defaultdict

from prodembed.cli import main as cli_main
from prodembed.evaluation import read_reports
from prodembed.pipeline import TASKS

HEADLINE = {
    "attributes": ("brand@10", "precision"),
    "clicked_purchased": ("rank@1", "median rank"),
    "sparse": ("hr@10", "hit ratio"),
    "returns": ("f1", "F1"),
}


def summarize(out: str) -> None:
    for task in TASKS:
        path = os.path.join(out, f"report_{task}.csv")
        if not os.path.exists(path):
            continue
        x, label = HEADLINE[task]
        values = defaultdict(dict)
        for _, emb, px, m in read_reports(path):
            values[emb][px] = m
        print(f"\n{task} ({x}, {label})")
        for emb, pts in values.items():
            if x in pts:
                print(f"  {emb:<10} {pts[x]:.4f}")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/synthetic.ini")
    ap.add_argument("--out", default="out")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    argv = ["pipeline", "--config", args.config, "--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    code = cli_main(argv)
    if code == 0:
        summarize(args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
