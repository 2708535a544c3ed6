#!/usr/bin/env python3
"""Plot-free summary of the input-perturbation bandit over a training run.

Reads a per-step training log written by `rvla train --log` (or
robusttrain.train(log_path=...)) and prints per-arm pull counts, mean raw
reward, and the pull share over the final quarter of training.

Usage:
    python3 scripts/inspect_bandit.py runs/robust-s0.log
"""

import argparse
from collections import defaultdict

import numpy as np


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("log", help="training log with the standard header")
    args = ap.parse_args()

    with open(args.log, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [line.rstrip("\n").split("\t") for line in fh]
    arm_col = header.index("arm")
    reward_col = header.index("raw_reward")

    pulls = defaultdict(list)
    late = defaultdict(int)
    cut = 3 * len(rows) // 4
    for i, row in enumerate(rows):
        if row[arm_col] == "-":
            continue
        pulls[row[arm_col]].append(float(row[reward_col]))
        if i >= cut:
            late[row[arm_col]] += 1

    total_late = sum(late.values()) or 1
    print(f"{'arm':<22s} {'pulls':>6s} {'mean reward':>12s} {'late share':>11s}")
    for arm in sorted(pulls, key=lambda a: -len(pulls[a])):
        print(f"{arm:<22s} {len(pulls[arm]):>6d} "
              f"{np.mean(pulls[arm]):>12.4f} {late[arm] / total_late:>11.3f}")


if __name__ == "__main__":
    main()
