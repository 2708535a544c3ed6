"""Command-line entry point.

Exit codes: 0 success, 1 runtime error, 2 usage error. The RVLA_SEED
environment variable supplies the seed when --seed is omitted.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import diagnostics, evalharness, flowpolicy, manipsim, robusttrain
from . import gradcore as gc
from . import uncertainty as unc


def _default_seed() -> int:
    return int(os.environ.get("RVLA_SEED", "0"))


def _ckpt_paths(prefix: str) -> tuple[str, str]:
    return prefix + ".manifest", prefix + ".bin"


def _load_policy(prefix: str) -> flowpolicy.PolicyParams:
    manifest, payload = _ckpt_paths(prefix)
    return flowpolicy.PolicyParams.load(manifest, payload)


def _banner(name: str, pairs: dict) -> None:
    joined = " ".join(f"{k}={v}" for k, v in pairs.items())
    print(f"[{name}] effective config: {joined}", flush=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rvla",
                                     description="flow-policy robustness workbench")
    subs = parser.add_subparsers(dest="verb", required=True)

    p = subs.add_parser("gen-data", help="generate an expert demonstration dataset")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = subs.add_parser("train", help="train a policy (baseline/robust/no_in/no_out)")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="robust",
                   choices=["baseline", "robust", "no_in", "no_out"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint path prefix")
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--log", default=None, help="per-step training log path")

    p = subs.add_parser("eval", help="17-perturbation robustness evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", default=None, help="perturbation spec text file")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--json", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--workers", type=int, default=1)

    p = subs.add_parser("sweep", help="unified noise-level sweep for one modality")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--modality", required=True,
                   choices=["action", "observation", "environment", "instruction"])
    p.add_argument("--levels", required=True, help="comma-separated levels in [0,1]")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="CSV output path")

    p = subs.add_parser("eval-mixed", help="mixed input+output perturbation trials")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)

    p = subs.add_parser("attack-demo", help="show the PGD action attack on one batch")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)

    subs.add_parser("gradcheck", help="finite-difference gradient verification")

    p = subs.add_parser("report", help="print a saved JSON report as a table")
    p.add_argument("--json", required=True)
    return parser


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    _banner("gen-data", {"episodes": args.episodes, "seed": seed, "out": args.out})
    data = manipsim.generate_dataset(args.episodes, seed)
    data.save(args.out)
    print(f"wrote {len(data)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg, adv = robusttrain.config_from_text(fh.read())
    else:
        cfg, adv = robusttrain.TrainConfig(), robusttrain.AdvConfig()
    # flags override config-file values which override built-in defaults
    cfg.mode = args.mode
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.seed = args.seed if args.seed is not None else _default_seed()
    _banner("train", {"data": args.data, "out": args.out,
                      **{line.split(" = ")[0]: line.split(" = ")[1]
                         for line in robusttrain.config_to_text(cfg, adv).splitlines()}})
    data = manipsim.Dataset.load(args.data)
    params, _ = robusttrain.train(data, cfg, adv, log_path=args.log,
                                  progress=max(1, cfg.steps // 10))
    params.save(*_ckpt_paths(args.out))
    print(f"checkpoint written to {args.out}.manifest / {args.out}.bin")
    return 0


def cmd_eval(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    suite = unc.suite_default()
    if args.suite:
        with open(args.suite, encoding="utf-8") as fh:
            suite = unc.specs_from_text(fh.read())
    _banner("eval", {"ckpt": args.ckpt, "episodes": args.episodes, "seed": seed,
                     "suite": args.suite or "default-17", "workers": args.workers})
    params = _load_policy(args.ckpt)
    cfg = evalharness.EvalConfig(episodes_per_cell=args.episodes, seed=seed,
                                 suite=suite)
    ckpt_id = gc.payload_checksum(_ckpt_paths(args.ckpt)[1])[:16]
    report = evalharness.evaluate(params, cfg, checkpoint_id=ckpt_id)
    for row in report.rows:
        print(f"{row.modality:<12s} {row.kind:<20s} "
              f"{row.successes:>3d}/{row.episodes:<3d} {row.success_rate:.3f}")
    print(f"{'all':<12s} {'average':<20s}        {report.average:.3f}")
    evalharness.write_report(report, json_path=args.json, csv_path=args.csv)
    return 0


def cmd_sweep(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    levels = [float(x) for x in args.levels.split(",")]
    _banner("sweep", {"ckpt": args.ckpt, "modality": args.modality,
                      "levels": args.levels, "episodes": args.episodes,
                      "seed": seed})
    params = _load_policy(args.ckpt)
    cfg = evalharness.EvalConfig(episodes_per_cell=args.episodes, seed=seed)
    pairs = evalharness.sweep(params, args.modality, levels, cfg)
    lines = ["modality,level,success_rate"]
    for level, rate in pairs:
        print(f"level {level:.3f}  success {rate:.3f}")
        lines.append(f"{args.modality},{level},{rate:.3f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def cmd_eval_mixed(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    _banner("eval-mixed", {"ckpt_a": args.ckpt_a, "ckpt_b": args.ckpt_b,
                           "trials": args.trials, "seed": seed})
    cfg = evalharness.EvalConfig(seed=seed)
    bits_a = evalharness.evaluate_mixed(_load_policy(args.ckpt_a), cfg, args.trials)
    bits_b = evalharness.evaluate_mixed(_load_policy(args.ckpt_b), cfg, args.trials)
    result = evalharness.paired_t_test(bits_a, bits_b)
    print(f"ckpt-a success {np.mean(bits_a):.3f}  ckpt-b success {np.mean(bits_b):.3f}")
    print(f"paired t = {result.t:.4f}, two-sided p = {result.p:.6f}"
          + ("  (degenerate variance)" if result.degenerate else ""))
    return 0


def cmd_attack_demo(args) -> int:
    _banner("attack-demo", {"ckpt": args.ckpt, "data": args.data,
                            "index": args.index})
    params = _load_policy(args.ckpt)
    data = manipsim.Dataset.load(args.data)
    idx = np.array([args.index % len(data)])
    batch = robusttrain.make_batch(data, idx)
    stream = manipsim.rng_for(0, 42)
    total, clean, adv, delta = robusttrain.output_robust_loss(
        params, batch, robusttrain.AdvConfig(), stream)
    print(f"clean flow loss       : {clean.item():.6f}")
    print(f"adversarial flow loss : {adv.item():.6f}")
    print(f"delta (||.||_inf = {np.abs(delta).max():.4f}):")
    print(np.array2string(delta.reshape(5, 3), precision=4))
    return 0


def cmd_gradcheck(args) -> int:
    return 0 if diagnostics.run_all() else 1


def cmd_report(args) -> int:
    import json
    with open(args.json, encoding="utf-8") as fh:
        report = evalharness.report_from_dict(json.load(fh))
    for row in report.rows:
        print(f"{row.modality:<12s} {row.kind:<20s} "
              f"{row.successes:>3d}/{row.episodes:<3d} {row.success_rate:.3f}")
    print(f"{'all':<12s} {'average':<20s}        {report.average:.3f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "eval-mixed": cmd_eval_mixed,
    "attack-demo": cmd_attack_demo,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return COMMANDS[args.verb](args)
    except (OSError, ValueError, LookupError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
