"""Robust training: PGD worst-case action noise, UCB-scheduled input
perturbations with a PGD image attack on top, and the combined objective.

Per step the loss is

    L_total = L_flow + lambda_out * L_adv_action + lambda_in * L_adv_input

with each adversarial term computed by a best-iterate signed-gradient ascent
inside an infinity-norm ball. The input arm is chosen by a UCB bandit whose
reward is the loss gap the perturbation induces on shared flow draws.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from . import flowpolicy as fp
from . import gradcore as gc
from . import uncertainty as unc
from .gradcore import Graph, Tensor
from .manipsim import Dataset, rng_for

OBS_EPS_DEFAULT = 8.0 / 255.0


@dataclass
class AdvConfig:
    eps_action: float = 0.03
    pgd_steps_action: int = 3
    pgd_alpha_action: float = 0.01
    eps_obs: float = OBS_EPS_DEFAULT        # normalized [0,1] image space
    pgd_steps_obs: int = 3
    pgd_alpha_obs: float = 2.0 / 255.0
    lambda_in: float = 1.0
    lambda_out: float = 1.0

    def __post_init__(self):
        if min(self.eps_action, self.pgd_alpha_action, self.eps_obs,
               self.pgd_alpha_obs) < 0 or min(self.pgd_steps_action,
                                              self.pgd_steps_obs) < 0:
            raise ValueError("epsilons, alphas and pgd step counts must be >= 0")


DEFAULT_ARMS = (
    "obs_gaussian_noise", "dead_pixel", "motion_blur", "color_jitter",
    "image_rotation", "image_shift", "lighting_variation",
    "distractor_objects", "lexical_transform", "syntactic_transform",
    "adversarial_prompt",
)


@dataclass
class TrainConfig:
    mode: str = "robust"            # baseline | robust | no_in | no_out
    steps: int = 5000
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    arms: tuple = DEFAULT_ARMS

    def __post_init__(self):
        if self.mode not in ("baseline", "robust", "no_in", "no_out"):
            raise ValueError(f"unknown training mode '{self.mode}'")
        for kind in self.arms:
            if unc.KINDS[kind].modality == unc.ACTION or kind == "external_force":
                raise ValueError(f"arm '{kind}' is not an input-side perturbation")


# ---------------------------------------------------------------------------
# flat key = value config files


def config_to_text(cfg: TrainConfig, adv: AdvConfig) -> str:
    lines = []
    for obj in (cfg, adv):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if f.name == "arms":
                value = ",".join(value)
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> tuple[TrainConfig, AdvConfig]:
    cfg_fields = {f.name: f.type for f in fields(TrainConfig)}
    adv_fields = {f.name: f.type for f in fields(AdvConfig)}
    cfg_kw, adv_kw = {}, {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise ValueError(f"malformed config line: '{line}'")
        if key == "arms":
            cfg_kw[key] = tuple(w for w in value.split(",") if w)
        elif key == "mode":
            cfg_kw[key] = value
        elif key in ("steps", "batch", "seed"):
            cfg_kw[key] = int(value)
        elif key == "lr":
            cfg_kw[key] = float(value)
        elif key in ("pgd_steps_action", "pgd_steps_obs"):
            adv_kw[key] = int(value)
        elif key in adv_fields:
            adv_kw[key] = float(value)
        elif key in cfg_fields:
            cfg_kw[key] = value
        else:
            raise ValueError(f"unknown config key '{key}'")
    return TrainConfig(**cfg_kw), AdvConfig(**adv_kw)


# ---------------------------------------------------------------------------
# UCB bandit


@dataclass
class BanditState:
    n_arms: int
    alpha: float = 1.0
    min_samples: int = 10
    window: int = 100
    decay: float = 0.9
    pulls: list = field(default_factory=list)
    windows: list = field(default_factory=list)
    ema_mean: float = 0.0
    ema_var: float = 0.0
    total: int = 0
    skipped: int = 0

    def __post_init__(self):
        if not self.pulls:
            self.pulls = [0] * self.n_arms
            self.windows = [deque(maxlen=self.window) for _ in range(self.n_arms)]


def ucb_select(state: BanditState, arms) -> int:
    """Forced round-robin below min_samples, then mean + alpha*sqrt(log n / pulls)."""
    if len(arms) == 0:
        raise ValueError("empty arm set")
    under = [i for i in range(len(arms)) if state.pulls[i] < state.min_samples]
    if under:
        return min(under, key=lambda i: (state.pulls[i], i))
    best_i, best_score = 0, -np.inf
    for i in range(len(arms)):
        mean = float(np.mean(state.windows[i])) if state.windows[i] else 0.0
        score = mean + state.alpha * np.sqrt(np.log(state.total) / state.pulls[i])
        if score > best_score:
            best_i, best_score = i, score
    return best_i


def bandit_update(state: BanditState, arm: int, raw_reward: float) -> BanditState:
    if not np.isfinite(raw_reward):
        state.skipped += 1
        return state
    state.ema_mean = state.decay * state.ema_mean + (1 - state.decay) * raw_reward
    state.ema_var = (state.decay * state.ema_var
                     + (1 - state.decay) * (raw_reward - state.ema_mean) ** 2)
    normalized = (raw_reward - state.ema_mean) / (np.sqrt(state.ema_var) + 1e-8)
    state.windows[arm].append(normalized)
    state.pulls[arm] += 1
    state.total += 1
    return state


# ---------------------------------------------------------------------------
# PGD attacks


def _adv_action_loss(params: fp.PolicyParams, features: Tensor,
                     a1: np.ndarray, a0: np.ndarray, tau: np.ndarray,
                     delta: Tensor) -> Tensor:
    """||v(A_tau_hat, o) - (u - delta)||^2 with A1_hat = A1 + delta."""
    tau_col = tau.reshape(-1, 1)
    base = Tensor(tau_col * a1 + (1.0 - tau_col) * a0)
    a_tau_hat = gc.add(base, gc.mul(Tensor(tau_col), delta))
    target = gc.sub(Tensor(a0 - a1), delta)
    v = fp.velocity(params, features, a_tau_hat, tau)
    return gc.mse(v, target)


def worst_case_delta(params: fp.PolicyParams, features_np: np.ndarray,
                     a1: np.ndarray, a0: np.ndarray, tau: np.ndarray,
                     cfg: AdvConfig, stream: np.random.Generator) -> np.ndarray:
    """Best-iterate PGD over the action noise ball; zero noise is always a
    candidate so the returned loss dominates the clean loss."""
    shape = a1.shape
    candidates = [np.zeros(shape)]
    if cfg.pgd_steps_action > 0 and cfg.eps_action > 0:
        delta = stream.uniform(-cfg.eps_action, cfg.eps_action, size=shape)
        for _ in range(cfg.pgd_steps_action):
            candidates.append(delta.copy())
            with Graph() as g:
                delta_t = Tensor(delta, requires_grad=True)
                loss = _adv_action_loss(params, Tensor(features_np), a1, a0,
                                        tau, delta_t)
                grad = gc.grad_wrt_input(g, loss, delta_t).data
            delta = np.clip(delta + cfg.pgd_alpha_action * np.sign(grad),
                            -cfg.eps_action, cfg.eps_action)
        candidates.append(delta)
    best, best_loss = None, -np.inf
    for cand in candidates:
        with Graph():
            loss = _adv_action_loss(params, Tensor(features_np), a1, a0, tau,
                                    Tensor(cand)).item()
        if loss > best_loss:
            best, best_loss = cand, loss
    return best


def worst_case_eta(params: fp.PolicyParams, images01: np.ndarray, token_lists,
                   proprio: np.ndarray, a1: np.ndarray, a0: np.ndarray,
                   tau: np.ndarray, cfg: AdvConfig,
                   stream: np.random.Generator) -> np.ndarray:
    """Best-iterate PGD image noise in normalized [0,1] space, clean target u."""

    def loss_at(eta, graph):
        x = Tensor(np.clip(images01 + eta, 0.0, 1.0), requires_grad=True)
        feats = fp.encode_batch(params, x, token_lists, proprio)
        return x, fp.flow_loss_given(params, feats, a1, a0, tau)

    candidates = [np.zeros_like(images01)]
    if cfg.pgd_steps_obs > 0 and cfg.eps_obs > 0:
        eta = stream.uniform(-cfg.eps_obs, cfg.eps_obs, size=images01.shape)
        for _ in range(cfg.pgd_steps_obs):
            candidates.append(eta.copy())
            with Graph() as g:
                x, loss = loss_at(eta, g)
                grad = gc.grad_wrt_input(g, loss, x).data
            eta = np.clip(eta + cfg.pgd_alpha_obs * np.sign(grad),
                          -cfg.eps_obs, cfg.eps_obs)
            eta = np.clip(images01 + eta, 0.0, 1.0) - images01
        candidates.append(eta)
    best, best_loss = None, -np.inf
    for cand in candidates:
        with Graph():
            _, loss = loss_at(cand, None)
            value = loss.item()
        if value > best_loss:
            best, best_loss = cand, value
    return best


# ---------------------------------------------------------------------------
# loss terms (graph-building; callers combine and backprop once)


def output_robust_loss(params: fp.PolicyParams, batch, cfg: AdvConfig,
                       stream: np.random.Generator):
    """clean flow loss + lambda_out * adversarial flow loss on shared draws.

    Returns (total tensor, clean tensor, adversarial tensor, delta).
    """
    images, token_lists, proprio, actions = batch
    a1 = np.asarray(actions).reshape(-1, fp.FLAT_ACTIONS)
    a0, tau = fp.draw_flow_noise(len(token_lists), stream)
    feats = fp.encode_batch(params, Tensor(fp.normalize_images(images)),
                            token_lists, proprio)
    clean = fp.flow_loss_given(params, feats, a1, a0, tau)
    delta = worst_case_delta(params, feats.data, a1, a0, tau, cfg, stream)
    adv = _adv_action_loss(params, feats, a1, a0, tau, Tensor(delta))
    total = gc.add(clean, gc.mul(Tensor(cfg.lambda_out), adv))
    return total, clean, adv, delta


def input_robust_loss(params: fp.PolicyParams, batch, arm_kind: str,
                      cfg: AdvConfig, stream: np.random.Generator,
                      a0: np.ndarray, tau: np.ndarray,
                      clean_value: float):
    """lambda_in * flow loss under the arm's perturbation (+ PGD image noise).

    Returns (loss tensor, raw_reward, eta_inf_norm). raw_reward is the gap
    between the perturbed and clean losses on the same (A0, tau) draws.
    """
    spec = unc.PerturbationSpec(arm_kind)
    if not spec.is_input_side:
        raise ValueError(f"{arm_kind} is not an input-side arm")
    images, token_lists, proprio, actions = batch
    a1 = np.asarray(actions).reshape(-1, fp.FLAT_ACTIONS)
    pert_images = np.empty_like(np.asarray(images))
    pert_tokens = []
    for i in range(len(token_lists)):
        img, toks = unc.perturb_training_observation(
            np.asarray(images)[i], token_lists[i], spec, stream)
        pert_images[i] = img
        pert_tokens.append(toks)
    images01 = fp.normalize_images(pert_images)
    eta_norm = 0.0
    if spec.modality != unc.INSTRUCTION and cfg.pgd_steps_obs > 0:
        eta = worst_case_eta(params, images01, pert_tokens, proprio, a1, a0,
                             tau, cfg, stream)
        images01 = np.clip(images01 + eta, 0.0, 1.0)
        eta_norm = float(np.abs(eta).max())
    feats = fp.encode_batch(params, Tensor(images01), pert_tokens, proprio)
    loss = fp.flow_loss_given(params, feats, a1, a0, tau)
    raw_reward = loss.item() - clean_value
    return gc.mul(Tensor(cfg.lambda_in), loss), raw_reward, eta_norm


# ---------------------------------------------------------------------------
# training loop


def _sorted_params(params: fp.PolicyParams):
    return [params.tensors[k] for k in sorted(params.tensors)]


def make_batch(data: Dataset, idx: np.ndarray):
    return (data.images[idx], [data.tokens[i] for i in idx],
            data.proprio[idx], data.actions[idx])


def train(data: Dataset, cfg: TrainConfig, adv: AdvConfig | None = None,
          log_path=None, progress=None):
    """Train a flow policy on `data`; returns (params, log line list)."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    adv = adv or AdvConfig()
    params = fp.init_params(cfg.seed)
    plist = _sorted_params(params)
    opt = gc.AdamState()
    bandit = BanditState(n_arms=len(cfg.arms))
    log_lines = ["step\tL_pi0\tL_out\tL_in\tarm\traw_reward\tdelta_inf\teta_inf"]
    use_out = cfg.mode in ("robust", "no_in")
    use_in = cfg.mode in ("robust", "no_out")

    for step_i in range(cfg.steps):
        batch_rng = rng_for(cfg.seed, step_i, 1)
        flow_rng = rng_for(cfg.seed, step_i, 2)
        attack_rng = rng_for(cfg.seed, step_i, 3)
        idx = batch_rng.integers(0, len(data), size=cfg.batch)
        batch = make_batch(data, idx)
        a1 = batch[3].reshape(-1, fp.FLAT_ACTIONS)
        a0, tau = fp.draw_flow_noise(cfg.batch, flow_rng)

        arm_i, raw_reward = -1, 0.0
        delta_norm, eta_norm = 0.0, 0.0
        with Graph() as g:
            feats = fp.encode_batch(params,
                                    Tensor(fp.normalize_images(batch[0])),
                                    batch[1], batch[2])
            clean = fp.flow_loss_given(params, feats, a1, a0, tau)
            total = clean
            l_out_val, l_in_val = 0.0, 0.0
            if use_out:
                delta = worst_case_delta(params, feats.data, a1, a0, tau, adv,
                                         attack_rng)
                adv_loss = _adv_action_loss(params, feats, a1, a0, tau,
                                            Tensor(delta))
                total = gc.add(total, gc.mul(Tensor(adv.lambda_out), adv_loss))
                l_out_val = adv.lambda_out * adv_loss.item()
                delta_norm = float(np.abs(delta).max())
            if use_in:
                arm_i = ucb_select(bandit, cfg.arms)
                l_in, raw_reward, eta_norm = input_robust_loss(
                    params, batch, cfg.arms[arm_i], adv, attack_rng, a0, tau,
                    clean.item())
                total = gc.add(total, l_in)
                l_in_val = l_in.item()
            params.zero_grads()
            gc.backward(g, total)
        gc.adam_step(plist, [p.grad for p in plist], opt, cfg.lr)
        params.zero_grads()
        if use_in:
            bandit_update(bandit, arm_i, raw_reward)
        log_lines.append(
            f"{step_i}\t{clean.item():.6f}\t{l_out_val:.6f}\t{l_in_val:.6f}\t"
            f"{cfg.arms[arm_i] if arm_i >= 0 else '-'}\t{raw_reward:.6f}\t"
            f"{delta_norm:.6f}\t{eta_norm:.6f}")
        if progress is not None and (step_i + 1) % progress == 0:
            print(f"  step {step_i + 1}/{cfg.steps}  L_pi0={clean.item():.4f}",
                  flush=True)

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + "\n")
    return params, log_lines
