"""Deterministic 2D pick-and-place POMDP with a software-rasterized camera.

World coordinates live in the unit square. An episode is: drive the gripper
to the target object, grasp it, carry it to the goal pad, and release. The
camera is a top-down 32x32 RGB raster shaded with a Phong brightness term so
that lighting perturbations are visible to the policy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

IMAGE_SIZE = 32
CHUNK_LEN = 5
EPISODE_CAP = 60
STEP_GAIN = 0.05
GRASP_RADIUS = 0.06
SUCCESS_RADIUS = 0.06
EXPERT_RADIUS = 0.05
MIN_SEPARATION = 0.15
TOKEN_LEN = 12
PAD_ID = 0
UNK_ID = 1
BACKGROUND = 120

COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle")

COLOR_RGB = {
    "red": (205, 45, 45),
    "green": (45, 185, 60),
    "blue": (50, 80, 215),
}

VOCAB = (
    "<pad>", "<unk>", "pick", "up", "the", "red", "green", "blue",
    "square", "circle", "and", "place", "it", "on", "goal",
    # synonyms for the lexical transform
    "grab", "lift", "fetch", "put", "set", "deposit", "onto", "target",
    # syntactic / politeness filler
    "could", "you", "please", "kindly", "then", "with", "care",
    # adversarial distractor words
    "hey", "robot", "um", "maybe", "now", "quickly", "wait", "ok",
    "really", "hmm", "so",
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)


@dataclass(frozen=True)
class SimObject:
    oid: int
    shape: str
    color: str
    position: tuple[float, float]


@dataclass(frozen=True)
class WorldState:
    gripper: tuple[float, float]
    holding: int | None
    objects: tuple[SimObject, ...]
    goal: tuple[float, float]
    step_count: int
    task: tuple[int, tuple[float, float]]  # (target object id, goal)

    def object_by_id(self, oid: int) -> SimObject:
        for obj in self.objects:
            if obj.oid == oid:
                return obj
        raise LookupError(f"no object with id {oid}")


@dataclass(frozen=True)
class LightingState:
    intensity: float = 1.0      # I_light, Gamma-distributed under perturbation
    azimuth: float = 0.0
    elevation: float = np.pi / 2
    ambient: float = 0.2        # I_a
    diffuse: float = 0.8        # k_d
    specular: float = 0.0       # I_s


DEFAULT_LIGHT = LightingState()


@dataclass
class Observation:
    image: np.ndarray           # (32, 32, 3) uint8
    proprio: np.ndarray         # (3,) float64: gripper x, y, holding flag
    tokens: np.ndarray          # (>=12,) integer ids, PAD suffix


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Counter-based deterministic stream keyed by (seed, *key)."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & (2**64 - 1)),
                                                counter=list(key) + [0] * (4 - len(key))))


# ---------------------------------------------------------------------------
# environment


def _place_positions(rng: np.random.Generator, count: int,
                     min_sep: float = MIN_SEPARATION) -> list[tuple[float, float]]:
    positions: list[tuple[float, float]] = []
    sep = min_sep
    for _ in range(count):
        for attempt in range(101):
            if attempt == 100:
                sep *= 0.5  # relax after exhausting retries
            cand = (float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.25, 0.9)))
            if all(np.hypot(cand[0] - p[0], cand[1] - p[1]) >= sep for p in positions):
                positions.append(cand)
                break
    return positions


def reset(seed: int) -> WorldState:
    rng = rng_for(seed, 0)
    n_objects = int(rng.integers(1, 3))
    positions = _place_positions(rng, n_objects + 1)
    goal = positions[-1]
    descriptors = [(s, c) for s in SHAPES for c in COLORS]
    picks = rng.choice(len(descriptors), size=n_objects, replace=False)
    objects = tuple(
        SimObject(oid=i, shape=descriptors[d][0], color=descriptors[d][1],
                  position=positions[i])
        for i, d in enumerate(picks)
    )
    target = int(rng.integers(0, n_objects))
    return WorldState(gripper=(0.5, 0.1), holding=None, objects=objects,
                      goal=goal, step_count=0, task=(target, goal))


def _move_gripper(s: WorldState, dx: float, dy: float) -> WorldState:
    gx = float(np.clip(s.gripper[0] + dx, 0.0, 1.0))
    gy = float(np.clip(s.gripper[1] + dy, 0.0, 1.0))
    objects = s.objects
    if s.holding is not None:
        objects = tuple(replace(o, position=(gx, gy)) if o.oid == s.holding else o
                        for o in objects)
    return replace(s, gripper=(gx, gy), objects=objects)


def step(s: WorldState, a) -> tuple[WorldState, bool, bool]:
    """Apply one clamped action (dx, dy, grip); returns (state, done, success)."""
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    s = _move_gripper(s, STEP_GAIN * a[0], STEP_GAIN * a[1])
    holding = s.holding
    if a[2] > 0 and holding is None:
        dists = [(np.hypot(o.position[0] - s.gripper[0], o.position[1] - s.gripper[1]), o.oid)
                 for o in s.objects]
        dist, oid = min(dists)
        if dist <= GRASP_RADIUS:
            holding = oid
    elif a[2] < 0:
        holding = None
    s = replace(s, holding=holding, step_count=s.step_count + 1)
    target = s.object_by_id(s.task[0])
    at_goal = np.hypot(target.position[0] - s.goal[0],
                       target.position[1] - s.goal[1]) <= SUCCESS_RADIUS
    success = bool(at_goal and s.holding != target.oid)
    done = success or s.step_count >= EPISODE_CAP
    return s, done, success


def apply_push(s: WorldState, displacement) -> WorldState:
    """External displacement of the gripper (and any held object)."""
    return _move_gripper(s, float(displacement[0]), float(displacement[1]))


# ---------------------------------------------------------------------------
# rendering


def _light_direction(light: LightingState) -> np.ndarray:
    ce = np.cos(light.elevation)
    return np.array([ce * np.cos(light.azimuth), ce * np.sin(light.azimuth),
                     np.sin(light.elevation)])


_PIX = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
_PX, _PY = np.meshgrid(_PIX, _PIX, indexing="xy")  # _PY rows, _PX cols


def _shape_mask(obj: SimObject, radius: float = 0.05) -> np.ndarray:
    dx = _PX - obj.position[0]
    dy = _PY - obj.position[1]
    if obj.shape == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    return dx * dx + dy * dy <= radius * radius


def render(s: WorldState, light: LightingState = DEFAULT_LIGHT) -> np.ndarray:
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), float(BACKGROUND))
    # flat surfaces use n = (0, 0, 1)
    normals = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    normals[:, :, 2] = 1.0

    # goal pad outline
    gdx = np.abs(_PX - s.goal[0])
    gdy = np.abs(_PY - s.goal[1])
    outer = (gdx <= 0.07) & (gdy <= 0.07)
    inner = (gdx <= 0.045) & (gdy <= 0.045)
    img[outer & ~inner] = (230, 220, 80)

    for obj in s.objects:
        mask = _shape_mask(obj)
        img[mask] = COLOR_RGB[obj.color]
        # hemispherical pseudo-normals so the light azimuth shows on objects
        dx = (_PX - obj.position[0]) / 0.05
        dy = (_PY - obj.position[1]) / 0.05
        nz = np.sqrt(np.clip(1.0 - dx * dx - dy * dy, 0.04, 1.0))
        norm = np.sqrt(dx * dx + dy * dy + nz * nz)
        for c, comp in enumerate((dx, -dy, nz)):  # image y grows downward
            normals[:, :, c] = np.where(mask, comp / norm, normals[:, :, c])

    # gripper marker: dark cross
    gx = int(np.clip(s.gripper[0] * IMAGE_SIZE, 1, IMAGE_SIZE - 2))
    gy = int(np.clip(s.gripper[1] * IMAGE_SIZE, 1, IMAGE_SIZE - 2))
    img[gy, gx - 1:gx + 2] = (20, 20, 20)
    img[gy - 1:gy + 2, gx] = (20, 20, 20)

    ldir = _light_direction(light)
    ndotl = np.clip(normals @ ldir, 0.0, None)
    scale = np.clip(light.ambient + light.diffuse * light.intensity * ndotl
                    + light.specular, 0.0, 2.0)
    return np.clip(img * scale[:, :, None], 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# instructions


def tokenize(words) -> np.ndarray:
    ids = [WORD_TO_ID.get(w, UNK_ID) for w in words]
    while len(ids) < TOKEN_LEN:
        ids.append(PAD_ID)
    return np.asarray(ids, dtype=np.int64)


def instruction_words(task_color: str, task_shape: str) -> list[str]:
    return ["pick", "up", "the", task_color, task_shape,
            "and", "place", "it", "on", "the", "goal"]


def instruction_for_task(s: WorldState) -> np.ndarray:
    target = s.object_by_id(s.task[0])
    return tokenize(instruction_words(target.color, target.shape))


def observe(s: WorldState, light: LightingState = DEFAULT_LIGHT) -> Observation:
    proprio = np.array([s.gripper[0], s.gripper[1],
                        0.0 if s.holding is None else 1.0])
    return Observation(image=render(s, light), proprio=proprio,
                       tokens=instruction_for_task(s))


# ---------------------------------------------------------------------------
# scripted expert


def expert_action(s: WorldState) -> np.ndarray:
    target = s.object_by_id(s.task[0])
    if s.holding == target.oid:
        dest, grip_at_dest = s.goal, -1.0
    else:
        dest, grip_at_dest = target.position, +1.0
    dx = dest[0] - s.gripper[0]
    dy = dest[1] - s.gripper[1]
    dist = float(np.hypot(dx, dy))
    move = np.clip(np.array([dx, dy]) / STEP_GAIN, -1.0, 1.0)
    grip = grip_at_dest if dist <= EXPERT_RADIUS else (-grip_at_dest)
    return np.array([move[0], move[1], grip])


def rollout_expert(seed: int):
    """Yield (state, action) pairs of a full expert episode."""
    s = reset(seed)
    done = False
    while not done:
        a = expert_action(s)
        yield s, a
        s, done, _ = step(s, a)


# ---------------------------------------------------------------------------
# dataset


MAGIC = b"RVLA"
VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray    # (N, 32, 32, 3) uint8
    proprio: np.ndarray   # (N, 3) float64
    tokens: np.ndarray    # (N, 12) uint16
    actions: np.ndarray   # (N, 5, 3) float64

    def __len__(self) -> int:
        return self.images.shape[0]

    def save(self, path) -> None:
        try:
            with open(path, "wb") as fh:
                fh.write(MAGIC)
                fh.write(struct.pack("<I", VERSION))
                fh.write(struct.pack("<Q", len(self)))
                for i in range(len(self)):
                    fh.write(self.images[i].astype(np.uint8).tobytes())
                    fh.write(self.proprio[i].astype("<f8").tobytes())
                    fh.write(self.tokens[i].astype("<u2").tobytes())
                    fh.write(self.actions[i].astype("<f8").tobytes())
        except OSError as err:
            raise OSError(f"failed to write dataset to {path}: {err}") from err

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: bad magic, not a dataset file")
        version, = struct.unpack_from("<I", raw, 4)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        count, = struct.unpack_from("<Q", raw, 8)
        off = 16
        images = np.empty((count, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
        proprio = np.empty((count, 3))
        tokens = np.empty((count, TOKEN_LEN), dtype=np.uint16)
        actions = np.empty((count, CHUNK_LEN, 3))
        for i in range(count):
            images[i] = np.frombuffer(raw, np.uint8, 3072, off).reshape(32, 32, 3)
            off += 3072
            proprio[i] = np.frombuffer(raw, "<f8", 3, off)
            off += 24
            tokens[i] = np.frombuffer(raw, "<u2", TOKEN_LEN, off)
            off += 2 * TOKEN_LEN
            actions[i] = np.frombuffer(raw, "<f8", 15, off).reshape(CHUNK_LEN, 3)
            off += 120
        return cls(images, proprio, tokens, actions)


def generate_dataset(episodes: int, seed: int) -> Dataset:
    """Roll the expert; record an (observation, next-5-actions) pair every 5 steps."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    images, proprio, tokens, actions = [], [], [], []
    for ep in range(episodes):
        trace = list(rollout_expert(seed * 1_000_003 + ep))
        for start in range(0, len(trace), CHUNK_LEN):
            obs = observe(trace[start][0])
            chunk = [trace[start + j][1] if start + j < len(trace) else trace[-1][1]
                     for j in range(CHUNK_LEN)]
            images.append(obs.image)
            proprio.append(obs.proprio)
            tokens.append(obs.tokens[:TOKEN_LEN])
            actions.append(np.stack(chunk))
    return Dataset(images=np.stack(images),
                   proprio=np.stack(proprio),
                   tokens=np.stack(tokens).astype(np.uint16),
                   actions=np.stack(actions))
