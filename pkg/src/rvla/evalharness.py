"""Closed-loop robustness evaluation: per-perturbation success rates, unified
noise-level sweeps, mixed input+output trials, and paired significance tests.

Episodes are pure functions of (policy snapshot, perturbation specs, seed).
Policy randomness and perturbation randomness use separate streams so an
identity perturbation reproduces the clean episode seed-for-seed.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import flowpolicy as fp
from . import manipsim as sim
from . import uncertainty as unc


@dataclass
class EvalConfig:
    episodes_per_cell: int = 50
    seed: int = 0
    suite: list = field(default_factory=unc.suite_default)
    n_ode_steps: int = 10
    gamma: float = 1.0

    def __post_init__(self):
        if self.episodes_per_cell < 1:
            raise ValueError("episodes_per_cell must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class ReportRow:
    kind: str
    modality: str
    params: dict
    episodes: int
    successes: int
    bits: list

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes


@dataclass
class RobustnessReport:
    rows: list
    metadata: dict

    def row(self, kind: str) -> ReportRow:
        for r in self.rows:
            if r.kind == kind:
                return r
        raise LookupError(kind)

    @property
    def average(self) -> float:
        """Mean success rate over the perturbed (non-clean) rows."""
        perturbed = [r for r in self.rows if r.kind != "clean"]
        return float(np.mean([r.success_rate for r in perturbed]))

    @property
    def perturbed_bits(self) -> list:
        bits = []
        for r in self.rows:
            if r.kind != "clean":
                bits.extend(r.bits)
        return bits


def episode_seed(seed: int, row: int, episode: int) -> int:
    """Stable per-cell seed; adding rows never shifts other rows' episodes."""
    digest = hashlib.sha256(f"{seed}/{row}/{episode}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _normalize_specs(spec) -> list:
    if spec is None:
        return []
    if isinstance(spec, unc.PerturbationSpec):
        return [spec]
    return list(spec)


def run_episode(params, spec, seed: int, n_ode_steps: int = 10,
                policy=None) -> bool:
    """One closed-loop episode; returns terminal success.

    `spec` may be None, one PerturbationSpec, or a sequence of them.
    `policy` overrides the flow policy with a callable (obs, stream) -> chunk
    (used to validate the harness against the scripted expert).
    """
    specs = _normalize_specs(spec)
    if policy is None:
        def policy(obs, stream):
            return fp.sample_actions(params, obs, n_ode_steps, stream)
    policy_rng = sim.rng_for(seed, 11)
    pert_rng = sim.rng_for(seed, 13)

    s = sim.reset(seed)
    light = sim.DEFAULT_LIGHT
    sched = None
    force_spec = next((sp for sp in specs if sp.kind == "external_force"), None)
    light_spec = next((sp for sp in specs if sp.kind == "lighting_variation"), None)
    for sp in specs:
        if sp.kind == "distractor_objects":
            s = unc.spawn_distractors(s, pert_rng,
                                      count=int(round(sp.resolved()["count"])))
    if force_spec is not None:
        sched = unc.init_force_schedule(force_spec.resolved()["magnitude"],
                                        pert_rng)

    t = 0
    done = success = False
    if light_spec is not None:
        light = unc.sample_lighting(light, t, pert_rng,
                                    strength=light_spec.resolved()["strength"])
    while not done:
        obs = sim.observe(s, light)
        for sp in specs:
            if sp.modality == unc.OBSERVATION:
                obs.image = unc.perturb_image(obs.image, sp, pert_rng)
            elif sp.modality == unc.INSTRUCTION:
                obs.tokens = unc.perturb_instruction(obs.tokens, sp, pert_rng)
        chunk = policy(obs, policy_rng)
        for sp in specs:
            if sp.modality == unc.ACTION:
                chunk = unc.perturb_action(chunk, sp, pert_rng)
        for a in np.asarray(chunk).reshape(-1, 3):
            s, done, success = sim.step(s, a)
            if sched is not None:
                disp, sched = unc.external_force_step(sched, t, pert_rng)
                if disp != (0.0, 0.0):
                    s = sim.apply_push(s, disp)
            t += 1
            if light_spec is not None:
                light = unc.sample_lighting(
                    light, t, pert_rng,
                    strength=light_spec.resolved()["strength"])
            if done:
                break
    return bool(success)


def evaluate(params, cfg: EvalConfig, checkpoint_id: str = "",
             policy=None) -> RobustnessReport:
    """Clean row plus one row per suite spec, seeded per (seed, row, episode)."""
    rows = []
    cells = [("clean", None)] + [(sp.kind, sp) for sp in cfg.suite]
    for row_i, (kind, sp) in enumerate(cells):
        bits = []
        for ep in range(cfg.episodes_per_cell):
            bits.append(int(run_episode(params, sp,
                                        episode_seed(cfg.seed, row_i, ep),
                                        cfg.n_ode_steps, policy=policy)))
        rows.append(ReportRow(
            kind=kind,
            modality=sp.modality if sp else "none",
            params=sp.resolved() if sp else {},
            episodes=cfg.episodes_per_cell,
            successes=int(sum(bits)),
            bits=bits,
        ))
    return RobustnessReport(rows=rows, metadata={
        "report_version": 1,
        "checkpoint": checkpoint_id,
        "seed": cfg.seed,
        "episodes_per_cell": cfg.episodes_per_cell,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })


SWEEP_KINDS = {
    unc.ACTION: ("uniform_noise", "gaussian_noise", "action_bias",
                 "random_flips", "sudden_spikes"),
    unc.OBSERVATION: ("obs_gaussian_noise", "dead_pixel", "motion_blur",
                      "color_jitter", "image_rotation", "image_shift"),
    unc.ENVIRONMENT: ("external_force", "distractor_objects",
                      "lighting_variation"),
    unc.INSTRUCTION: ("lexical_transform", "syntactic_transform",
                      "adversarial_prompt"),
}


def sweep(params, modality: str, levels, cfg: EvalConfig):
    """(level, success_rate) pairs; episodes cycle through the modality's kinds
    and reuse the same seeds at every level so levels are paired."""
    if modality not in SWEEP_KINDS:
        raise ValueError(f"unknown modality '{modality}'")
    kinds = SWEEP_KINDS[modality]
    out = []
    for level in levels:
        bits = []
        for ep in range(cfg.episodes_per_cell):
            sp = unc.PerturbationSpec(kinds[ep % len(kinds)], level=float(level))
            bits.append(int(run_episode(params, sp,
                                        episode_seed(cfg.seed, 9000, ep),
                                        cfg.n_ode_steps)))
        out.append((float(level), float(np.mean(bits))))
    return out


INPUT_KINDS = tuple(k for k, info in unc.KINDS.items()
                    if k not in unc.OUTPUT_SIDE_KINDS)
OUTPUT_KINDS = unc.OUTPUT_SIDE_KINDS


def mixed_pairs(seed: int, trials: int):
    """The (input kind, output kind) sequence: a pure function of (seed, trials)."""
    pairs = []
    for trial in range(trials):
        rng = sim.rng_for(seed, 5000 + trial)
        pairs.append((INPUT_KINDS[int(rng.integers(len(INPUT_KINDS)))],
                      OUTPUT_KINDS[int(rng.integers(len(OUTPUT_KINDS)))]))
    return pairs


def evaluate_mixed(params, cfg: EvalConfig, trials: int):
    """Success bits under simultaneous input+output perturbation per trial."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    bits = []
    for trial, (kin, kout) in enumerate(mixed_pairs(cfg.seed, trials)):
        specs = [unc.PerturbationSpec(kin), unc.PerturbationSpec(kout)]
        bits.append(int(run_episode(params, specs,
                                    episode_seed(cfg.seed, 8000, trial),
                                    cfg.n_ode_steps)))
    return bits


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on per-trial success bits."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("inputs must be equal-length vectors of length >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0)
        return TTestResult(t=np.inf if mean > 0 else -np.inf, p=0.0,
                           degenerate=True)
    t = mean / (sd / np.sqrt(d.size))
    p = 2.0 * sps.t.sf(abs(t), df=d.size - 1)
    return TTestResult(t=float(t), p=float(p))


# ---------------------------------------------------------------------------
# report emission


def _round3(x: float) -> str:
    from decimal import Decimal, ROUND_HALF_UP
    return str(Decimal(repr(x)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def report_to_dict(report: RobustnessReport) -> dict:
    return {
        "metadata": report.metadata,
        "average": report.average,
        "rows": [{
            "kind": r.kind, "modality": r.modality, "params": r.params,
            "episodes": r.episodes, "successes": r.successes,
            "success_rate": r.success_rate, "bits": r.bits,
        } for r in report.rows],
    }


def report_from_dict(d: dict) -> RobustnessReport:
    rows = [ReportRow(kind=r["kind"], modality=r["modality"],
                      params=r["params"], episodes=r["episodes"],
                      successes=r["successes"], bits=r["bits"])
            for r in d["rows"]]
    return RobustnessReport(rows=rows, metadata=d["metadata"])


def write_report(report: RobustnessReport, json_path=None, csv_path=None) -> None:
    try:
        if json_path is not None:
            with open(json_path, "w", encoding="utf-8") as fh:
                json.dump(report_to_dict(report), fh, indent=1)
        if csv_path is not None:
            with open(csv_path, "w", encoding="utf-8") as fh:
                fh.write("modality,kind,episodes,successes,success_rate\n")
                for r in report.rows:
                    fh.write(f"{r.modality},{r.kind},{r.episodes},"
                             f"{r.successes},{_round3(r.success_rate)}\n")
                fh.write(f"all,average,,,{_round3(report.average)}\n")
    except OSError as err:
        raise OSError(f"failed to write report ({json_path or csv_path}): {err}") from err
