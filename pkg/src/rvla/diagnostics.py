"""Finite-difference verification of every differentiable primitive and of
the full flow-matching loss, used by the `gradcheck` CLI command and tests."""

from __future__ import annotations

import numpy as np

from . import flowpolicy as fp
from . import gradcore as gc
from .gradcore import Tensor

TOLERANCE = 1e-5


def _leaf(rng, shape, scale=0.1):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def primitive_checks(seed: int = 0):
    """Yield (name, max relative error) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    checks = []

    def check(name, build, leaf):
        checks.append((name, gc.check_gradient(build, leaf)))

    for trial in range(2):
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, (4, 2))
        check(f"matmul_a[{trial}]", lambda a=a, b=b: gc.sum_(gc.matmul(a, b)), a)
        check(f"matmul_b[{trial}]", lambda a=a, b=b: gc.sum_(gc.matmul(a, b)), b)

        x = _leaf(rng, (2, 5, 5))
        k = _leaf(rng, (3, 2, 3, 3))
        for stride in (1, 2):
            check(f"conv2d_x_s{stride}[{trial}]",
                  lambda x=x, k=k, s=stride: gc.sum_(gc.conv2d(x, k, s)), x)
            check(f"conv2d_k_s{stride}[{trial}]",
                  lambda x=x, k=k, s=stride: gc.sum_(gc.conv2d(x, k, s)), k)

        # keep relu inputs away from the kink at 0
        r = Tensor(rng.normal(0, 0.1, size=(4, 4)), requires_grad=True)
        r.data[np.abs(r.data) < 1e-3] = 0.05
        check(f"relu[{trial}]", lambda r=r: gc.sum_(gc.mul(gc.relu(r), r)), r)

        t = _leaf(rng, (3, 3))
        check(f"tanh[{trial}]", lambda t=t: gc.sum_(gc.tanh(t)), t)

        u = _leaf(rng, (2, 3))
        v = _leaf(rng, (2, 3))
        check(f"add[{trial}]", lambda u=u, v=v: gc.sum_(gc.mul(gc.add(u, v), u)), u)
        check(f"mul[{trial}]", lambda u=u, v=v: gc.sum_(gc.mul(u, v)), v)
        check(f"mean[{trial}]", lambda u=u: gc.mean(gc.mul(u, u)), u)
        check(f"mse_a[{trial}]", lambda u=u, v=v: gc.mse(u, v), u)
        check(f"mse_b[{trial}]", lambda u=u, v=v: gc.mse(u, v), v)

        logits = _leaf(rng, (4, 6), scale=0.5)
        targets = rng.integers(0, 6, size=4)
        check(f"softmax_xent[{trial}]",
              lambda l=logits, t=targets: gc.softmax_cross_entropy(l, t), logits)

        table = _leaf(rng, (7, 3))
        ids = rng.integers(0, 7, size=5)
        check(f"embedding[{trial}]",
              lambda tb=table, i=ids: gc.sum_(gc.mul(gc.embedding(tb, i),
                                                     gc.embedding(tb, i))), table)
    return checks


def flow_loss_checks(seed: int = 0, batch_size: int = 4):
    """Finite-difference check of flow_loss against every parameter group."""
    rng = np.random.default_rng(seed)
    params = fp.init_params(seed)
    images = rng.integers(0, 256, size=(batch_size, 32, 32, 3)).astype(np.uint8)
    tokens = [rng.integers(0, fp.VOCAB_SIZE, size=12) for _ in range(batch_size)]
    proprio = rng.uniform(0, 1, size=(batch_size, 3))
    actions = rng.uniform(-1, 1, size=(batch_size, 5, 3))
    a0, tau = fp.draw_flow_noise(batch_size, np.random.default_rng(seed + 1))

    def build():
        feats = fp.encode_batch(params, Tensor(fp.normalize_images(images)),
                                tokens, proprio)
        return fp.flow_loss_given(params, feats, actions, a0, tau)

    checks = []
    for name in sorted(params.tensors):
        leaf = params.tensors[name]
        checks.append((f"flow_loss/{name}",
                       gc.check_gradient(build, leaf, max_entries=12,
                                         seed=seed)))
    return checks


def run_all(seed: int = 0, verbose: bool = True) -> bool:
    checks = primitive_checks(seed) + flow_loss_checks(seed)
    ok = True
    for name, err in checks:
        passed = err < TOLERANCE
        ok = ok and passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name:<28s} rel_err={err:.3e}")
    if verbose:
        print(f"{len(checks)} gradient checks, "
              f"{sum(err < TOLERANCE for _, err in checks)} passed")
    return ok
