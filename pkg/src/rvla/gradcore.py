"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine records op nodes on a per-expression :class:`Graph` (a tape).
Leaf tensors (parameters, inputs) are never owned by a graph, so the same
parameter tensor can participate in many graphs over the course of training.
Gradients can be pulled either into the persistent ``.grad`` buffers
(:func:`backward`) or into a detached tensor for a single input
(:func:`grad_wrt_input`), which is what the PGD attacks use.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation precondition other than shape was violated."""


_ACTIVE_GRAPHS: list["Graph"] = []


class Graph:
    """Append-only tape of op nodes; insertion order is topological order.

    Usable as a context manager: ops executed inside `with Graph() as g:`
    record onto g even when their operands came from another graph (those
    operands are then treated as constants by g's reverse sweep).
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _register(self, node: "Tensor") -> None:
        node.node_id = len(self.nodes)
        self.nodes.append(node)

    def __enter__(self) -> "Graph":
        _ACTIVE_GRAPHS.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_GRAPHS.pop()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "graph", "node_id",
                 "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.graph: Graph | None = None
        self.node_id: int | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _resolve_graph(parents) -> Graph:
    if _ACTIVE_GRAPHS:
        return _ACTIVE_GRAPHS[-1]
    graph = None
    for p in parents:
        if p.graph is None or p.graph is graph:
            continue
        if graph is None:
            graph = p.graph
        else:
            # fold the other graph's nodes in; they stay topologically sorted
            # because disjoint graphs share no edges until this op
            for node in p.graph.nodes:
                node.graph = graph
                graph._register(node)
    return graph if graph is not None else Graph()


def _node(op: str, parents, data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    out.op = op
    out.parents = tuple(parents)
    out.backward_fn = backward_fn
    out.graph = _resolve_graph(parents)
    out.graph._register(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _node("add", (a, b), data, lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _node("sub", (a, b), data, lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _node("mul", (a, b), data, lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _node("matmul", (a, b), data, lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # subgradient at 0 is 0
    return _node("relu", (x,), x.data * mask, lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = x.shape
    return _node("reshape", (x,), x.data.reshape(shape),
                 lambda g: (g.reshape(orig),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis if axis >= 0 else t.data.ndim + axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node("concat", tensors, data, bwd)


def sum_(x: Tensor) -> Tensor:
    return _node("sum", (x,), np.asarray(x.data.sum()),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _node("mean", (x,), np.asarray(x.data.mean()),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.asarray((diff * diff).mean())

    def bwd(g):
        scaled = (2.0 / n) * g * diff
        return scaled, -scaled

    return _node("mse", (a, b), data, bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into `table`; gradient scatters back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise LookupError(f"token id out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node("embedding", (table,), data, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b with numpy broadcasting."""
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node("div", (a, b), data, bwd)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - dot),)

    return _node("softmax", (x,), probs, bwd)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("expected logits (N, C) and targets (N,)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -np.log(probs[np.arange(n), targets] + 1e-300)
    data = np.asarray(nll.mean())

    def bwd(g):
        gp = probs.copy()
        gp[np.arange(n), targets] -= 1.0
        return (g * gp / n,)

    return _node("softmax_xent", (logits,), data, bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    b, c, hp, wp = xp.shape
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride))
    return view.reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with zero padding 1; H' = ceil(H/stride).

    Accepts (C, H, W) or batched (B, C, H, W) input with kernel (F, C, kh, kw).
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects (B,C,H,W) and (F,C,kh,kw), got {x.shape}, {k.shape}")
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")
    b, c, h, w = xd.shape
    f, ck, kh, kw = k.shape
    if ck != c:
        raise ShapeError(f"kernel channels {ck} != input channels {c}")
    if kh > h + 2 or kw > w + 2:
        raise ShapeError("kernel larger than padded input")
    pad = 1
    ho = -(-h // stride)
    wo = -(-w // stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = _im2col(xp, kh, kw, stride, ho, wo)          # (B, C*kh*kw, Ho*Wo)
    wmat = k.data.reshape(f, c * kh * kw)
    out = np.einsum("fk,bkp->bfp", wmat, col).reshape(b, f, ho, wo)

    def bwd(g):
        gd = g[None] if squeeze else g
        gmat = gd.reshape(b, f, ho * wo)
        gk = np.einsum("bfp,bkp->fk", gmat, col).reshape(k.shape)
        gcol = np.einsum("fk,bfp->bkp", wmat, gmat)
        gcol = gcol.reshape(b, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += gcol[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + w]
        return (gx[0] if squeeze else gx), gk

    return _node("conv2d", (x, k), out[0] if squeeze else out, bwd)


# ---------------------------------------------------------------------------
# reverse sweep


def _sweep(g: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, has shape {loss.shape}")
    if loss.graph is not g or loss.node_id is None:
        raise ContractError("loss is not a node of this graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(g.nodes[: loss.node_id + 1]):
        gout = grads.get(id(node))
        if gout is None or node.backward_fn is None or not node.requires_grad:
            continue
        for parent, contrib in zip(node.parents, node.backward_fn(gout)):
            if contrib is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = contrib if acc is None else acc + contrib
    return grads


def backward(g: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad of every requires_grad tensor."""
    grads = _sweep(g, loss)
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.requires_grad and id(t) in grads:
            t.grad = grads[id(t)].copy() if t.grad is None else t.grad + grads[id(t)]
        stack.extend(t.parents)


def grad_wrt_input(g: Graph, loss: Tensor, input: Tensor) -> Tensor:
    """Return d(loss)/d(input) without touching any .grad buffers."""
    if not input.requires_grad:
        raise LookupError("input does not require grad")
    grads = _sweep(g, loss)
    got = grads.get(id(input))
    if got is None:
        raise LookupError("input does not participate in the graph")
    return Tensor(got)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; non-finite grads skip their param."""
    state.t += 1
    t = state.t
    for p, g in zip(params, grads):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            warnings.warn("adam_step: non-finite gradient, update skipped", stacklevel=2)
            continue
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[key] = m
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# checkpoint io


def save_tensors(manifest_path, payload_path, named: dict, metadata: dict | None = None) -> None:
    """Manifest: '#' metadata lines, then one 'name<TAB>shape-csv<TAB>offset' per tensor.

    Payload holds raw little-endian float64 buffers, concatenated in manifest order.
    """
    lines = []
    if metadata:
        for key, value in metadata.items():
            lines.append(f"# {key}={value}")
    offset = 0
    blobs = []
    for name in sorted(named):
        arr = named[name].data if isinstance(named[name], Tensor) else np.asarray(named[name])
        blob = arr.astype("<f8").tobytes()
        shape = ",".join(str(d) for d in arr.shape) or "1"
        lines.append(f"{name}\t{shape}\t{offset}")
        blobs.append(blob)
        offset += len(blob)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(payload_path, "wb") as fh:
        for blob in blobs:
            fh.write(blob)


def load_tensors(manifest_path, payload_path):
    """Inverse of :func:`save_tensors`; returns (dict name->ndarray, metadata dict)."""
    metadata: dict[str, str] = {}
    entries = []
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                metadata[key] = value
                continue
            name, shape_csv, offset = line.split("\t")
            shape = tuple(int(d) for d in shape_csv.split(","))
            entries.append((name, shape, int(offset)))
    payload = open(payload_path, "rb").read()
    out = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape))
        out[name] = np.frombuffer(payload, dtype="<f8", count=count,
                                  offset=offset).reshape(shape).copy()
    return out, metadata


def payload_checksum(payload_path) -> str:
    return hashlib.sha256(open(payload_path, "rb").read()).hexdigest()


# ---------------------------------------------------------------------------
# finite differences


def finite_difference(fn, x: np.ndarray, step: float = 1e-6,
                      indices=None) -> np.ndarray:
    """Central finite-difference gradient of scalar fn at x.

    With `indices` (flat), only those coordinates are evaluated; the rest of
    the returned array is zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradient(build_loss, leaf: Tensor, step: float = 1e-6,
                   max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    `build_loss` must construct a fresh scalar loss from current leaf data.
    Large leaves can be spot-checked on `max_entries` random coordinates.
    """
    with Graph() as g:
        loss = build_loss()
        analytic = grad_wrt_input(g, loss, leaf).data
    indices = None
    if max_entries is not None and leaf.size > max_entries:
        indices = np.random.default_rng(seed).choice(leaf.size, size=max_entries,
                                                     replace=False)

    def value():
        with Graph():
            return build_loss().item()

    numeric = finite_difference(value, leaf.data, step, indices=indices)
    aflat = analytic.reshape(-1)
    nflat = numeric.reshape(-1)
    if indices is not None:
        aflat = aflat[indices]
        nflat = nflat[indices]
    scale = max(np.abs(aflat).max(), np.abs(nflat).max(), 1e-12)
    return float(np.abs(aflat - nflat).max() / scale)
