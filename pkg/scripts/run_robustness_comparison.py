#!/usr/bin/env python3
"""Train all four modes over several seeds and compare robustness.

Reproduces the headline comparison: robust-mode training versus the plain
baseline and the two single-sided ablations (no_in drops the input-side
perturbation term, no_out drops the worst-case action term), each scored on
the 17-perturbation suite plus the clean rate, with a paired t-test over
shared episode seeds.

Usage:
    python3 scripts/run_robustness_comparison.py [--episodes 500]
        [--seeds 0 1 2] [--cache-dir runs] [--eval-episodes 50]
"""

import argparse
from pathlib import Path

import numpy as np

import rvla.evalharness as ev
import rvla.manipsim as sim
import rvla.robusttrain as rt

from run_fragility_sweep import cached_train

MODES = ("baseline", "robust", "no_in", "no_out")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=500)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--eval-episodes", type=int, default=50)
    ap.add_argument("--cache-dir", default="runs")
    args = ap.parse_args()

    cache = Path(args.cache_dir)
    cache.mkdir(exist_ok=True)
    data = sim.generate_dataset(args.episodes, args.seeds[0])

    reports = {}
    for seed in args.seeds:
        for mode in MODES:
            params = cached_train(cache, data, mode, seed)
            cfg = ev.EvalConfig(episodes_per_cell=args.eval_episodes,
                                seed=seed)
            reports[(mode, seed)] = ev.evaluate(params, cfg)
            ev.write_report(reports[(mode, seed)],
                            json_path=cache / f"{mode}-s{seed}.json",
                            csv_path=cache / f"{mode}-s{seed}.csv")

    print(f"\n{'mode':<10s} {'clean':>7s} {'17-pert avg':>12s}   per-seed avgs")
    stats = {}
    for mode in MODES:
        cleans = [reports[(mode, s)].row("clean").success_rate
                  for s in args.seeds]
        avgs = [reports[(mode, s)].average for s in args.seeds]
        stats[mode] = (np.mean(cleans), np.mean(avgs))
        print(f"{mode:<10s} {np.mean(cleans):>7.3f} {np.mean(avgs):>12.3f}   "
              + " ".join(f"{a:.3f}" for a in avgs))

    robust_bits = np.concatenate(
        [reports[("robust", s)].perturbed_bits for s in args.seeds])
    base_bits = np.concatenate(
        [reports[("baseline", s)].perturbed_bits for s in args.seeds])
    res = ev.paired_t_test(robust_bits, base_bits)
    print(f"\nrobust - baseline on the 17-perturbation average: "
          f"{stats['robust'][1] - stats['baseline'][1]:+.3f}")
    print(f"paired t = {res.t:.3f}, two-sided p = {res.p:.5f}")
    print(f"clean gap (robust - baseline): "
          f"{stats['robust'][0] - stats['baseline'][0]:+.3f}")


if __name__ == "__main__":
    main()
