"""The 17-perturbation library: actions, observations, environment, instructions.

Every transform is a pure function of (input, spec, stream). Numeric kinds
expose one primary magnitude parameter; setting ``level`` on a spec resolves
that parameter to ``level * modality_maximum`` so noise strength is comparable
across modalities.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import manipsim
from .manipsim import (BACKGROUND, IMAGE_SIZE, LightingState, SimObject,
                       UNK_ID, WORD_TO_ID, WorldState)

ACTION = "action"
OBSERVATION = "observation"
ENVIRONMENT = "environment"
INSTRUCTION = "instruction"


@dataclass(frozen=True)
class KindInfo:
    modality: str
    defaults: dict
    primary: str          # the magnitude parameter that `level` rescales
    primary_max: float


# Fixed order: action, observation, environment, instruction rows of the
# 17-perturbation evaluation table.
KINDS: dict[str, KindInfo] = {
    "uniform_noise":      KindInfo(ACTION, {"sigma": 0.04}, "sigma", 1.0),
    "gaussian_noise":     KindInfo(ACTION, {"sigma": 0.3}, "sigma", 1.0),
    "action_bias":        KindInfo(ACTION, {"sigma": 0.03}, "sigma", 1.0),
    "random_flips":       KindInfo(ACTION, {"p": 0.05}, "p", 1.0),
    "sudden_spikes":      KindInfo(ACTION, {"p": 0.05, "sigma": 1.0}, "p", 1.0),
    "obs_gaussian_noise": KindInfo(OBSERVATION, {"sigma": 70.0}, "sigma", 255.0),
    "dead_pixel":         KindInfo(OBSERVATION, {"p": 0.1}, "p", 1.0),
    "motion_blur":        KindInfo(OBSERVATION, {"sigma": 1.0, "ksize": 5}, "sigma", 5.0),
    "color_jitter":       KindInfo(OBSERVATION, {"max_factor": 0.4}, "max_factor", 1.0),
    "image_rotation":     KindInfo(OBSERVATION, {"max_degrees": 20.0}, "max_degrees", 180.0),
    "image_shift":        KindInfo(OBSERVATION, {"max_shift": 0.15}, "max_shift", 1.0),
    "external_force":     KindInfo(ENVIRONMENT, {"magnitude": 0.02}, "magnitude", 0.1),
    "distractor_objects": KindInfo(ENVIRONMENT, {"count": 3}, "count", 3.0),
    "lighting_variation": KindInfo(ENVIRONMENT, {"strength": 1.0}, "strength", 1.0),
    "lexical_transform":  KindInfo(INSTRUCTION, {"p": 0.5}, "p", 1.0),
    "syntactic_transform": KindInfo(INSTRUCTION, {"p": 1.0}, "p", 1.0),
    "adversarial_prompt": KindInfo(INSTRUCTION, {"p": 1.0}, "p", 1.0),
}

INPUT_MODALITIES = (OBSERVATION, INSTRUCTION)
# environment kinds split by where they act: force is an output-side push,
# distractors and lighting enter through the rendered observation
OUTPUT_SIDE_KINDS = ("uniform_noise", "gaussian_noise", "action_bias",
                     "random_flips", "sudden_spikes", "external_force")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    level: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind '{self.kind}'")
        unknown = set(self.params) - set(KINDS[self.kind].defaults)
        if unknown:
            raise ValueError(f"unknown params for {self.kind}: {sorted(unknown)}")
        if self.level is not None and not 0.0 <= self.level <= 1.0:
            raise ValueError(f"level must lie in [0, 1], got {self.level}")

    @property
    def modality(self) -> str:
        return KINDS[self.kind].modality

    @property
    def is_input_side(self) -> bool:
        return self.kind not in OUTPUT_SIDE_KINDS

    def resolved(self) -> dict:
        """Defaults merged with overrides; `level` sets the primary magnitude."""
        info = KINDS[self.kind]
        params = dict(info.defaults)
        params.update(self.params)
        if self.level is not None:
            params[info.primary] = self.level * info.primary_max
        return params


def suite_default() -> list[PerturbationSpec]:
    """All 17 perturbations with appendix-default parameters, in table order."""
    return [PerturbationSpec(kind) for kind in KINDS]


# ---------------------------------------------------------------------------
# spec text format: one `kind key=value ...` per line


def specs_to_text(specs) -> str:
    lines = []
    for spec in specs:
        parts = [spec.kind]
        for key in sorted(spec.params):
            parts.append(f"{key}={spec.params[key]!r}")
        if spec.level is not None:
            parts.append(f"level={spec.level!r}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def specs_from_text(text: str) -> list[PerturbationSpec]:
    specs = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, *pairs = line.split()
        params, level = {}, None
        for pair in pairs:
            key, _, value = pair.partition("=")
            if not value:
                raise ValueError(f"malformed spec entry '{pair}'")
            if key == "level":
                level = float(value)
            else:
                params[key] = float(value)
        specs.append(PerturbationSpec(kind, params, level))
    return specs


# ---------------------------------------------------------------------------
# action perturbations (applied elementwise to a whole chunk)


def perturb_action(chunk: np.ndarray, spec: PerturbationSpec,
                   stream: np.random.Generator) -> np.ndarray:
    if spec.modality != ACTION:
        raise ValueError(f"{spec.kind} is not an action perturbation")
    a = np.asarray(chunk, dtype=np.float64)
    p = spec.resolved()
    if spec.kind == "uniform_noise":
        out = a + stream.uniform(-p["sigma"], p["sigma"], size=a.shape)
    elif spec.kind == "gaussian_noise":
        out = a + stream.normal(0.0, p["sigma"], size=a.shape) if p["sigma"] > 0 else a
    elif spec.kind == "action_bias":
        out = a + p["sigma"]
    elif spec.kind == "random_flips":
        xi = stream.uniform(0.0, 1.0, size=a.shape)
        zeta = stream.uniform(0.0, 1.0, size=a.shape)
        out = np.where(xi < p["p"], np.where(zeta < 0.5, 1.0, -1.0), a)
    elif spec.kind == "sudden_spikes":
        # the trigger draw is symmetric so spikes hit in both directions
        xi = stream.uniform(-1.0, 1.0, size=a.shape)
        out = np.where(np.abs(xi) < p["p"], a + p["sigma"] * np.sign(xi), a)
    else:  # pragma: no cover
        raise AssertionError(spec.kind)
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------------------
# observation (image) perturbations


def gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    if sigma <= 0:
        kern = np.zeros((ksize, ksize))
        kern[ksize // 2, ksize // 2] = 1.0
        return kern
    k = (ksize - 1) // 2
    u, v = np.meshgrid(np.arange(-k, k + 1), np.arange(-k, k + 1))
    kern = np.exp(-(u * u + v * v) / (2.0 * sigma * sigma))
    return kern / kern.sum()


def _convolve_image(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
    k = kern.shape[0] // 2
    pad = np.pad(img.astype(np.float64), ((k, k), (k, k), (0, 0)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for du in range(kern.shape[0]):
        for dv in range(kern.shape[1]):
            out += kern[du, dv] * pad[du:du + img.shape[0], dv:dv + img.shape[1]]
    return out


def _luminance(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def _resample_inverse(img: np.ndarray, src_rows: np.ndarray,
                      src_cols: np.ndarray) -> np.ndarray:
    """Nearest-neighbor inverse mapping with background fill out of frame."""
    rows = np.round(src_rows).astype(np.int64)
    cols = np.round(src_cols).astype(np.int64)
    inside = (rows >= 0) & (rows < img.shape[0]) & (cols >= 0) & (cols < img.shape[1])
    out = np.full_like(img, BACKGROUND)
    out[inside] = img[rows[inside], cols[inside]]
    return out


def perturb_image(img: np.ndarray, spec: PerturbationSpec,
                  stream: np.random.Generator) -> np.ndarray:
    if spec.modality != OBSERVATION:
        raise ValueError(f"{spec.kind} is not an observation perturbation")
    img = np.asarray(img)
    p = spec.resolved()
    if spec.kind == "obs_gaussian_noise":
        if p["sigma"] <= 0:
            return img.copy()
        noisy = img + stream.normal(0.0, p["sigma"], size=img.shape)
        return np.clip(noisy, 0, 255).astype(np.uint8)
    if spec.kind == "dead_pixel":
        xi = stream.uniform(0.0, 1.0, size=img.shape[:2])
        zeta = stream.uniform(0.0, 1.0, size=img.shape[:2])
        out = img.copy()
        out[(xi < p["p"]) & (zeta < 0.5)] = 255
        out[(xi < p["p"]) & (zeta >= 0.5)] = 0
        return out
    if spec.kind == "motion_blur":
        kern = gaussian_kernel(p["sigma"], int(p["ksize"]))
        return np.clip(np.round(_convolve_image(img, kern)), 0, 255).astype(np.uint8)
    if spec.kind == "color_jitter":
        m = p["max_factor"]
        fb, fs, fsh = stream.uniform(1.0 - m, 1.0 + m, size=3)
        out = img.astype(np.float64) * fb                                   # brightness
        gray = _luminance(out)[:, :, None]
        out = gray + fs * (out - gray)                                      # saturation
        box = _convolve_image(np.clip(out, 0, 255), np.full((3, 3), 1 / 9))
        out = box + fsh * (out - box)                                       # sharpness
        return np.clip(np.round(out), 0, 255).astype(np.uint8)
    if spec.kind == "image_rotation":
        theta = np.deg2rad(stream.uniform(-p["max_degrees"], p["max_degrees"]))
        if theta == 0.0:
            return img.copy()
        c = (img.shape[0] - 1) / 2.0
        rr, cc = np.meshgrid(np.arange(img.shape[0]), np.arange(img.shape[1]),
                             indexing="ij")
        cos_t, sin_t = np.cos(-theta), np.sin(-theta)
        src_r = cos_t * (rr - c) - sin_t * (cc - c) + c
        src_c = sin_t * (rr - c) + cos_t * (cc - c) + c
        return _resample_inverse(img, src_r, src_c)
    if spec.kind == "image_shift":
        h, w = img.shape[:2]
        di = stream.uniform(-p["max_shift"] * h, p["max_shift"] * h)
        dj = stream.uniform(-p["max_shift"] * w, p["max_shift"] * w)
        if di == 0.0 and dj == 0.0:
            return img.copy()
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return _resample_inverse(img, rr - di, cc - dj)
    raise AssertionError(spec.kind)  # pragma: no cover


# ---------------------------------------------------------------------------
# instruction perturbations


SYNONYMS = {
    "pick": ("grab", "lift", "fetch"),
    "place": ("put", "set", "deposit"),
    "on": ("onto",),
    "goal": ("target",),
}

TASK_WORDS = set(manipsim.COLORS) | set(manipsim.SHAPES)

DISTRACTOR_WORDS = ("hey", "robot", "um", "maybe", "now", "quickly", "wait",
                    "ok", "really", "hmm", "so")
DISTRACTOR_IDS = tuple(WORD_TO_ID[w] for w in DISTRACTOR_WORDS)

_ID_TO_WORD = {i: w for w, i in WORD_TO_ID.items()}


def _words_of(tokens) -> list[str]:
    return [_ID_TO_WORD[int(t)] for t in tokens if int(t) != manipsim.PAD_ID]


def _task_words_in(words) -> tuple[str | None, str | None]:
    color = next((w for w in words if w in manipsim.COLORS), None)
    shape = next((w for w in words if w in manipsim.SHAPES), None)
    return color, shape


def perturb_instruction(tokens, spec: PerturbationSpec,
                        stream: np.random.Generator) -> np.ndarray:
    """Token-level instruction noise; the target color/shape is never altered.

    Output may be longer than the stored 12-token form (the encoder pools over
    arbitrary lengths); PAD is kept as a suffix.
    """
    if spec.modality != INSTRUCTION:
        raise ValueError(f"{spec.kind} is not an instruction perturbation")
    p = spec.resolved()
    words = _words_of(tokens)
    if spec.kind == "lexical_transform":
        out = []
        for w in words:
            choices = SYNONYMS.get(w)
            if choices and w not in TASK_WORDS and stream.uniform() < p["p"]:
                out.append(choices[int(stream.integers(len(choices)))])
            else:
                out.append(w)
        words = out
    elif spec.kind == "syntactic_transform":
        if stream.uniform() < p["p"]:
            color, shape = _task_words_in(words)
            if color is not None and shape is not None:
                variants = (
                    ["on", "the", "goal", "place", "the", color, shape],
                    ["could", "you", "pick", "up", "the", color, shape, "and",
                     "place", "it", "on", "the", "goal"],
                    ["please", "pick", "up", "the", color, shape, "then",
                     "place", "it", "on", "the", "goal"],
                )
                words = list(variants[int(stream.integers(len(variants)))])
    elif spec.kind == "adversarial_prompt":
        if stream.uniform() < p["p"]:
            n_insert = int(stream.integers(1, 4))
            for _ in range(n_insert):
                pos = int(stream.integers(0, len(words) + 1))
                # typos tokenize to UNK; other inserts come from the distractor set
                if stream.uniform() < 0.3:
                    word = "<unk>"
                else:
                    word = DISTRACTOR_WORDS[int(stream.integers(len(DISTRACTOR_WORDS)))]
                words.insert(pos, word)
    else:  # pragma: no cover
        raise AssertionError(spec.kind)
    return manipsim.tokenize(words)


# ---------------------------------------------------------------------------
# environment perturbations


def lighting_scale(light: LightingState) -> float:
    """Phong brightness factor on a flat pixel (n = (0,0,1))."""
    ndotl = max(0.0, np.sin(light.elevation))
    return float(np.clip(light.ambient + light.diffuse * light.intensity * ndotl
                         + light.specular, 0.0, 2.0))


def _paint_distractors(img: np.ndarray, avoid: set,
                       stream: np.random.Generator, count: int) -> np.ndarray:
    out = img.copy()
    combos = [(c, sh) for c in manipsim.COLORS for sh in manipsim.SHAPES
              if (c, sh) not in avoid]
    for i in range(count):
        color, shape = combos[int(stream.integers(len(combos)))]
        pos = (float(stream.uniform(0.1, 0.9)), float(stream.uniform(0.1, 0.9)))
        mask = manipsim._shape_mask(SimObject(-1 - i, shape, color, pos))
        out[mask] = manipsim.COLOR_RGB[color]
    return out


def perturb_training_observation(img: np.ndarray, tokens, spec: PerturbationSpec,
                                 stream: np.random.Generator):
    """Input-side perturbation of a stored (image, tokens) training sample.

    Dataset samples carry no world state, so the two environment arms act
    directly on the image: lighting applies the flat-pixel Phong factor,
    distractors are rasterized onto the frame (never matching the
    instruction's target color/shape).
    """
    if not spec.is_input_side:
        raise ValueError(f"{spec.kind} is not an input-side perturbation")
    p = spec.resolved()
    if spec.modality == OBSERVATION:
        return perturb_image(img, spec, stream), tokens
    if spec.modality == INSTRUCTION:
        return img, perturb_instruction(tokens, spec, stream)
    if spec.kind == "lighting_variation":
        light = sample_lighting(manipsim.DEFAULT_LIGHT, 0, stream,
                                strength=p["strength"])
        scaled = np.clip(img.astype(np.float64) * lighting_scale(light), 0, 255)
        return scaled.astype(np.uint8), tokens
    if spec.kind == "distractor_objects":
        words = _words_of(tokens)
        color, shape = _task_words_in(words)
        avoid = {(color, shape)} if color and shape else set()
        return _paint_distractors(img, avoid, stream, int(round(p["count"]))), tokens
    raise AssertionError(spec.kind)  # pragma: no cover


@dataclass(frozen=True)
class ForceSchedule:
    magnitude: float = 0.02
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    next_onset: int = -1
    remaining: int = 0


def init_force_schedule(magnitude: float,
                        stream: np.random.Generator) -> ForceSchedule:
    return ForceSchedule(magnitude=magnitude,
                         next_onset=int(stream.integers(40, 51)))


def external_force_step(sched: ForceSchedule, t: int,
                        stream: np.random.Generator):
    """Displacement for step t plus the advanced schedule.

    Disturbance windows last 5 +/- 2 steps and recur every 40-50 steps; the
    push is a constant +x displacement while a window is active.
    """
    if sched.next_onset < 0:
        sched = replace(sched, next_onset=int(stream.integers(40, 51)))
    if sched.remaining > 0:
        disp = (sched.magnitude * sched.direction[0],
                sched.magnitude * sched.direction[1])
        return disp, replace(sched, remaining=sched.remaining - 1)
    if t >= sched.next_onset:
        duration = int(stream.integers(3, 8))
        sched = replace(sched, remaining=duration - 1,
                        next_onset=t + int(stream.integers(40, 51)))
        disp = (sched.magnitude * sched.direction[0],
                sched.magnitude * sched.direction[1])
        return disp, sched
    return (0.0, 0.0), sched


def sample_lighting(prev: LightingState, t: int, stream: np.random.Generator,
                    strength: float = 1.0) -> LightingState:
    """Resample intensity/azimuth every 3 steps; elevation fixed at 45 degrees.

    `strength` blends between the default light (0) and the fully random
    light (1) so a level-0 spec is an exact identity.
    """
    if t % 3 != 0:
        return prev
    intensity = float(stream.gamma(1.0, 1.0))
    azimuth = float(stream.uniform(0.0, 2.0 * np.pi))
    if strength >= 1.0:
        return LightingState(intensity=intensity, azimuth=azimuth,
                             elevation=np.pi / 4)
    base = manipsim.DEFAULT_LIGHT
    return LightingState(
        intensity=(1 - strength) * base.intensity + strength * intensity,
        azimuth=strength * azimuth,
        elevation=(1 - strength) * base.elevation + strength * (np.pi / 4),
    )


def spawn_distractors(s: WorldState, stream: np.random.Generator,
                      count: int = 3) -> WorldState:
    """Add distractor objects near the target or goal, never matching the target."""
    target = s.object_by_id(s.task[0])
    taken = {(o.color, o.shape) for o in (target,)}
    combos = [(c, sh) for c in manipsim.COLORS for sh in manipsim.SHAPES
              if (c, sh) not in taken]
    existing = [o.position for o in s.objects] + [s.goal]
    next_id = max(o.oid for o in s.objects) + 1
    new_objects = list(s.objects)
    for i in range(count):
        anchor = target.position if stream.uniform() < 0.5 else s.goal
        sep = 0.1
        for attempt in range(101):
            if attempt == 100:
                sep *= 0.5
            cand = (float(np.clip(anchor[0] + stream.uniform(-0.2, 0.2), 0.02, 0.98)),
                    float(np.clip(anchor[1] + stream.uniform(-0.2, 0.2), 0.02, 0.98)))
            if all(np.hypot(cand[0] - p[0], cand[1] - p[1]) >= sep for p in existing):
                break
        color, shape = combos[int(stream.integers(len(combos)))]
        new_objects.append(SimObject(oid=next_id + i, shape=shape, color=color,
                                     position=cand))
        existing.append(cand)
    return replace(s, objects=tuple(new_objects))
