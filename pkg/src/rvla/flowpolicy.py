"""Conditional flow-matching action head with a small conv/token/proprio encoder.

The policy learns a velocity field v(A_tau, obs, tau) matching the straight
rectified-flow target u = A0 - A1, and samples action chunks by Euler
integration A <- A - dtau * v from a standard-normal start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .manipsim import CHUNK_LEN, IMAGE_SIZE, TOKEN_LEN, VOCAB_SIZE, Observation

ACTION_DIM = 3
FLAT_ACTIONS = CHUNK_LEN * ACTION_DIM   # 15
FEATURE_DIM = 96                        # 64 conv + 16 token + 16 proprio
TAU_DIM = 16
TRUNK_IN = FEATURE_DIM + TAU_DIM + FLAT_ACTIONS
HIDDEN = 128
N_BINS = 64


@dataclass
class PolicyParams:
    tensors: dict[str, Tensor]
    head: str = "flow"   # "flow" | "token"

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def save(self, manifest_path, payload_path) -> None:
        gc.save_tensors(manifest_path, payload_path, self.tensors,
                        metadata={"head": self.head, "chunk_len": CHUNK_LEN,
                                  "bins": N_BINS, "vocab": VOCAB_SIZE})

    @classmethod
    def load(cls, manifest_path, payload_path) -> "PolicyParams":
        arrays, meta = gc.load_tensors(manifest_path, payload_path)
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(tensors=tensors, head=meta.get("head", "flow"))


def _color_contrast_init(rng) -> np.ndarray:
    """First-layer filters start as opponent-color detectors.

    The scene background is a uniform gray, so zero-sum channel mixes make
    objects, the goal outline, and the gripper stand out immediately instead
    of waiting for the filters to discover color contrast from scratch.
    """
    mixes = [
        (1.0, -1.0, 0.0),     # red objects (yellow goal cancels: R ~ G there)
        (-1.0, 1.0, 0.0),     # green objects
        (0.0, -1.0, 1.0),     # blue objects
        (0.5, 0.5, -1.0),     # yellow goal outline
        (0.0, 0.0, 0.0),      # dark gripper cross (center-surround below)
        (0.4, 0.4, 0.4),      # brightness (lighting changes)
        (1.0, 0.0, -1.0),
        (-0.5, 1.0, -0.5),
    ]
    w = np.zeros((8, 3, 3, 3))
    for f, mix in enumerate(mixes):
        for c, m in enumerate(mix):
            w[f, c, 1, 1] = m
    # the goal pad is a 1-pixel outline; a lone center tap on a stride-2
    # grid can miss it entirely, so spread that filter over the full window
    for c, m in enumerate(mixes[3]):
        w[3, c, :, :] = m / 9.0
    # the gripper is darker than the background, not a color: use a
    # center-surround profile so a dark center on gray lights up
    w[4] = 0.0
    w[4, :, :, :] = 0.5 / 8.0
    w[4, :, 1, 1] = -0.5
    noise = rng.normal(0.0, 0.005, size=w.shape)
    # zero-sum noise per filter: a flat gray background must map to exactly 0
    noise -= noise.mean(axis=(1, 2, 3), keepdims=True)
    return w + noise


def _pool_init(rng) -> np.ndarray:
    """Second-layer filters start as per-channel pass-throughs (two output
    maps per input channel) with enough weight that 1-2 pixel blobs
    survive the stride-2 grid at useful magnitude."""
    w = np.zeros((16, 8, 3, 3))
    for f in range(16):
        w[f, f % 8] = 1.0 / 3.0
        if f % 8 == 3:
            # the yellow detector also fires weakly on red/green objects;
            # subtracting their maps leaves only the goal outline
            w[f, 0] = -1.0 / 3.0
            w[f, 1] = -1.0 / 3.0
    noise = rng.normal(0.0, 0.005, size=w.shape)
    noise -= noise.mean(axis=(1, 2, 3), keepdims=True)
    return w + noise


def init_params(seed: int, head: str = "flow") -> PolicyParams:
    rng = np.random.default_rng(seed)

    def dense(n_in, n_out):
        return rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_out))

    tensors = {
        "conv1_w": _color_contrast_init(rng),
        "conv2_w": _pool_init(rng),
        # reads 16 channels x (x, y) spatial soft-argmax keypoints
        "img_proj_w": dense(32, 64),
        "img_proj_b": np.zeros(64),
        "tok_embed": rng.normal(0.0, 0.1, size=(VOCAB_SIZE, 16)),
        "prop_w": dense(3, 16),
        "prop_b": np.zeros(16),
        "tau_w1": dense(1, TAU_DIM),
        "tau_b1": np.zeros(TAU_DIM),
        "tau_w2": dense(TAU_DIM, TAU_DIM),
        "tau_b2": np.zeros(TAU_DIM),
        "trunk_w1": dense(TRUNK_IN, HIDDEN),
        "trunk_b1": np.zeros(HIDDEN),
        "trunk_w2": dense(HIDDEN, HIDDEN),
        "trunk_b2": np.zeros(HIDDEN),
        "trunk_w3": dense(HIDDEN, FLAT_ACTIONS),
        "trunk_b3": np.zeros(FLAT_ACTIONS),
    }
    if head == "token":
        tensors["tok_head_w1"] = dense(FEATURE_DIM, HIDDEN)
        tensors["tok_head_b1"] = np.zeros(HIDDEN)
        tensors["tok_head_w2"] = dense(HIDDEN, FLAT_ACTIONS * N_BINS)
        tensors["tok_head_b2"] = np.zeros(FLAT_ACTIONS * N_BINS)
    return PolicyParams(tensors={k: Tensor(v, requires_grad=True)
                                 for k, v in tensors.items()}, head=head)


# ---------------------------------------------------------------------------
# encoding


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 HWC image(s) in [0,255] -> float CHW batch in [0,1]."""
    arr = np.asarray(images, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    return arr.transpose(0, 3, 1, 2)


def _cell_centers(side: int) -> Tensor:
    # with 'same' padding each stride-2 layer centers output cell r on input
    # cell 2r, so h2 cell r sits on image pixel (scale*r) at world (scale*r+0.5)/32
    scale = IMAGE_SIZE // side
    ys, xs = np.mgrid[0:side, 0:side]
    coords = np.stack([(xs.ravel() * scale + 0.5) / IMAGE_SIZE,
                       (ys.ravel() * scale + 0.5) / IMAGE_SIZE], axis=1)
    return Tensor(coords)


def encode_batch(params: PolicyParams, images: Tensor, token_lists,
                 proprio: np.ndarray) -> Tensor:
    """Features (B, 96) from normalized image tensor, token ids, proprio array.

    `images` is a graph tensor so PGD can take gradients with respect to it.
    """
    b = images.shape[0]
    h1 = gc.relu(gc.conv2d(images, params["conv1_w"], stride=2))
    h2 = gc.relu(gc.conv2d(h1, params["conv2_w"], stride=2))
    # per-channel spatial attention: each of the 16 maps reduces to its
    # activation-weighted mean (x, y) -- background is exactly zero after
    # relu, so keypoints interpolate between cells at sub-cell precision
    side = h2.shape[-1]
    mass = gc.reshape(h2, (b * 16, side * side))
    mass = gc.mul(mass, mass)   # squaring suppresses weak cross-channel leakage
    total = gc.matmul(mass, Tensor(np.ones((side * side, 1)))) + 1e-6
    weights = gc.div(mass, total)
    keypts = gc.reshape(gc.matmul(weights, _cell_centers(side)), (b, 32))
    img_feat = gc.tanh(gc.add(gc.matmul(keypts, params["img_proj_w"]),
                              params["img_proj_b"]))
    tok_feat = _mean_pool_tokens(params, token_lists)
    prop = Tensor(np.asarray(proprio, dtype=np.float64).reshape(b, 3))
    prop_feat = gc.tanh(gc.add(gc.matmul(prop, params["prop_w"]), params["prop_b"]))
    return gc.concat((img_feat, tok_feat, prop_feat), axis=1)


def _mean_pool_tokens(params: PolicyParams, token_lists) -> Tensor:
    feats = []
    for tokens in token_lists:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and ids.max() >= VOCAB_SIZE:
            raise LookupError(f"token id {ids.max()} >= vocab size {VOCAB_SIZE}")
        rows = gc.embedding(params["tok_embed"], ids)              # (L, 16)
        feats.append(gc.matmul(Tensor(np.full((1, len(ids)), 1.0 / len(ids))), rows))
    return gc.concat(feats, axis=0)


def encode(params: PolicyParams, obs: Observation) -> Tensor:
    """Single-observation feature vector (96,)."""
    images = Tensor(normalize_images(obs.image))
    feat = encode_batch(params, images, [obs.tokens], obs.proprio.reshape(1, 3))
    return gc.reshape(feat, (FEATURE_DIM,))


def velocity(params: PolicyParams, features: Tensor, a_tau: Tensor,
             tau: np.ndarray) -> Tensor:
    """v(A_tau, obs, tau) for a batch: (B,96) x (B,15) x (B,) -> (B,15)."""
    tau_col = Tensor(np.asarray(tau, dtype=np.float64).reshape(-1, 1))
    t1 = gc.tanh(gc.add(gc.matmul(tau_col, params["tau_w1"]), params["tau_b1"]))
    tau_feat = gc.tanh(gc.add(gc.matmul(t1, params["tau_w2"]), params["tau_b2"]))
    x = gc.concat((features, tau_feat, a_tau), axis=1)
    h = gc.tanh(gc.add(gc.matmul(x, params["trunk_w1"]), params["trunk_b1"]))
    h = gc.tanh(gc.add(gc.matmul(h, params["trunk_w2"]), params["trunk_b2"]))
    return gc.add(gc.matmul(h, params["trunk_w3"]), params["trunk_b3"])


# ---------------------------------------------------------------------------
# flow matching


@dataclass(frozen=True)
class FlowSample:
    A0: np.ndarray
    A1: np.ndarray
    tau: float
    A_tau: np.ndarray
    target_u: np.ndarray


def interpolate(A0: np.ndarray, A1: np.ndarray, tau: float) -> FlowSample:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    A0 = np.asarray(A0, dtype=np.float64)
    A1 = np.asarray(A1, dtype=np.float64)
    return FlowSample(A0=A0, A1=A1, tau=tau,
                      A_tau=tau * A1 + (1.0 - tau) * A0,
                      target_u=A0 - A1)


def draw_flow_noise(batch_size: int, stream: np.random.Generator):
    """(A0, tau) draws: A0 ~ N(0, I), tau ~ Beta(1.5, 1)."""
    a0 = stream.normal(0.0, 1.0, size=(batch_size, FLAT_ACTIONS))
    tau = stream.beta(1.5, 1.0, size=batch_size)
    return a0, tau


def flow_loss_given(params: PolicyParams, features: Tensor, a1: np.ndarray,
                    a0: np.ndarray, tau: np.ndarray) -> Tensor:
    """Flow-matching MSE on fixed (A0, tau) draws; `features` may carry grads."""
    a1 = a1.reshape(-1, FLAT_ACTIONS)
    tau_col = tau.reshape(-1, 1)
    a_tau = Tensor(tau_col * a1 + (1.0 - tau_col) * a0)
    target = Tensor(a0 - a1)
    v = velocity(params, features, a_tau, tau)
    return gc.mse(v, target)


def flow_loss(params: PolicyParams, batch, stream: np.random.Generator) -> Tensor:
    """batch: (images uint8 (B,32,32,3), token_lists, proprio (B,3), actions (B,5,3))."""
    images, token_lists, proprio, actions = batch
    if len(token_lists) == 0:
        raise ValueError("batch must be non-empty")
    a0, tau = draw_flow_noise(len(token_lists), stream)
    feats = encode_batch(params, Tensor(normalize_images(images)),
                         token_lists, proprio)
    return flow_loss_given(params, feats, np.asarray(actions), a0, tau)


def sample_actions(params: PolicyParams, obs: Observation, n_steps: int,
                   stream: np.random.Generator, velocity_fn=None) -> np.ndarray:
    """Euler-integrate the learned field from noise; returns a (5, 3) chunk.

    `velocity_fn(a_flat, tau) -> (15,) velocity` replaces the learned field
    when given (used to verify the integrator against closed-form fields).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if velocity_fn is None:
        feats_np = encode(params, obs).data.reshape(1, FEATURE_DIM)

        def velocity_fn(a_flat, tau):
            v = velocity(params, Tensor(feats_np),
                         Tensor(a_flat.reshape(1, FLAT_ACTIONS)),
                         np.array([tau]))
            return v.data.reshape(FLAT_ACTIONS)

    a = stream.normal(0.0, 1.0, size=FLAT_ACTIONS)
    dtau = 1.0 / n_steps
    for k in range(n_steps):
        a = a - dtau * velocity_fn(a, k * dtau)
    return np.clip(a.reshape(CHUNK_LEN, ACTION_DIM), -1.0, 1.0)


# ---------------------------------------------------------------------------
# discrete (autoregressive-style) head


BIN_WIDTH = 2.0 / N_BINS


def discretize(chunk: np.ndarray) -> np.ndarray:
    """Uniform bins over [-1, 1]: bin = floor((a+1)/2 * 64), clamped to 63."""
    a = np.asarray(chunk, dtype=np.float64)
    return np.minimum(np.floor((a + 1.0) / 2.0 * N_BINS), N_BINS - 1).astype(np.int64)


def token_logits(params: PolicyParams, features: Tensor) -> Tensor:
    if params.head != "token":
        raise ValueError("policy has no discrete head")
    h = gc.tanh(gc.add(gc.matmul(features, params["tok_head_w1"]),
                       params["tok_head_b1"]))
    out = gc.add(gc.matmul(h, params["tok_head_w2"]), params["tok_head_b2"])
    return gc.reshape(out, (features.shape[0] * FLAT_ACTIONS, N_BINS))


def token_loss(params: PolicyParams, batch, delta: np.ndarray | None = None) -> Tensor:
    """Cross-entropy against discretize(A1 + delta); |delta| <= one bin width."""
    images, token_lists, proprio, actions = batch
    a1 = np.asarray(actions).reshape(-1, FLAT_ACTIONS)
    if delta is not None:
        delta = np.asarray(delta, dtype=np.float64).reshape(a1.shape)
        if np.abs(delta).max() > BIN_WIDTH + 1e-12:
            raise ValueError(f"|delta| exceeds the bin width {BIN_WIDTH}")
        a1 = np.clip(a1 + delta, -1.0, 1.0)
    feats = encode_batch(params, Tensor(normalize_images(images)),
                         token_lists, proprio)
    logits = token_logits(params, feats)
    targets = discretize(a1).reshape(-1)
    return gc.softmax_cross_entropy(logits, targets)
