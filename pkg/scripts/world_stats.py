#!/usr/bin/env python3
"""Print calibration statistics of a synthetic world for a few seeds."""

import argparse

import numpy as np

from prodembed.ingest import build_lifetime_lists, build_sessions
from prodembed.synth import WorldConfig, click_share_of_top, gen_world


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    for seed in args.seeds:
        w = gen_world(WorldConfig(seed=seed))
        sessions = build_sessions(w.events)
        clicks = [len(s.clicks()) for s in sessions]
        kinds = {k: sum(e.event_type == k for e in w.events) for k in ("click", "bag", "purchase")}
        labels = list(w.ground_truth.return_labels().values())
        print(f"seed {seed}")
        print(f"  events {len(w.events)}  " + "  ".join(f"{k} {v}" for k, v in kinds.items()))
        print(f"  sessions {len(sessions)}  mean clicks/session {np.mean(clicks):.2f}")
        print(f"  top-20% click share {click_share_of_top(w.events, 0.2, len(w.catalog)):.3f}")
        print(f"  users with >= 3 purchases {len(build_lifetime_lists(w.events, 3))}")
        print(f"  return rate {np.mean(labels):.3f} over {len(labels)} carts")


if __name__ == "__main__":
    main()
