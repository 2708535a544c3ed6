"""Flow policy: flow algebra, encoder contracts, Euler sampling, discrete head."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rvla.flowpolicy as fp
import rvla.gradcore as gc
import rvla.manipsim as sim
from rvla.gradcore import Tensor


@pytest.fixture(scope="module")
def params():
    return fp.init_params(0)


@pytest.fixture(scope="module")
def obs():
    return sim.observe(sim.reset(0))


def _batch(rng, n=4):
    images = rng.integers(0, 256, size=(n, 32, 32, 3)).astype(np.uint8)
    tokens = [rng.integers(0, fp.VOCAB_SIZE, size=12) for _ in range(n)]
    proprio = rng.uniform(0, 1, size=(n, 3))
    actions = rng.uniform(-1, 1, size=(n, 5, 3))
    return images, tokens, proprio, actions


# ---------------------------------------------------------------------------
# flow algebra


def test_interpolate_endpoints():
    rng = np.random.default_rng(0)
    a0 = rng.normal(size=15)
    a1 = rng.uniform(-1, 1, size=15)
    np.testing.assert_array_equal(fp.interpolate(a0, a1, 0.0).A_tau, a0)
    np.testing.assert_array_equal(fp.interpolate(a0, a1, 1.0).A_tau, a1)


def test_interpolate_midpoint_and_target():
    s = fp.interpolate(np.zeros(3), np.full(3, 2.0), 0.5)
    np.testing.assert_array_equal(s.A_tau, [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(s.target_u, [-2.0, -2.0, -2.0])


def test_interpolate_rejects_tau_out_of_range():
    with pytest.raises(ValueError):
        fp.interpolate(np.zeros(3), np.zeros(3), 1.5)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=200, deadline=None)
def test_flow_sample_algebra_machine_precision(seed):
    rng = np.random.default_rng(seed)
    a0 = rng.normal(size=15)
    a1 = rng.uniform(-1, 1, size=15)
    tau = float(rng.uniform())
    s = fp.interpolate(a0, a1, tau)
    assert np.abs(s.A_tau - (tau * a1 + (1 - tau) * a0)).max() == 0.0
    assert np.abs(s.target_u - (a0 - a1)).max() == 0.0
    # reconstruction identity holds to machine precision
    assert np.abs(s.target_u + a1 - a0).max() <= 4 * np.finfo(float).eps


def test_draw_flow_noise_marginals():
    a0, tau = fp.draw_flow_noise(50_000, np.random.default_rng(1))
    assert abs(a0.mean()) < 3.0 / np.sqrt(a0.size)
    assert abs(a0.std() - 1.0) < 3.0 / np.sqrt(a0.size)
    # Beta(1.5, 1) has mean 1.5/2.5 = 0.6
    assert abs(tau.mean() - 0.6) < 3 * 0.25 / np.sqrt(tau.size)
    assert 0.0 <= tau.min() and tau.max() <= 1.0


# ---------------------------------------------------------------------------
# flow loss


def test_flow_loss_zero_for_perfect_stub(params):
    rng = np.random.default_rng(2)
    _, tokens, proprio, actions = _batch(rng)
    a1 = actions.reshape(-1, 15)
    a0, tau = fp.draw_flow_noise(4, rng)
    # a "network" that outputs exactly the target: substitute features with
    # the target and a linear trunk is not available, so check via the loss
    # identity instead: mse(target, target) == 0
    target = Tensor(a0 - a1)
    assert gc.mse(target, Tensor(a0 - a1)).item() == 0.0


def test_flow_loss_closed_form_for_zero_network(params):
    # with v == 0 the loss is mean ||A0 - A1||^2 / 15 over the batch
    rng = np.random.default_rng(3)
    images, tokens, proprio, actions = _batch(rng)
    a1 = actions.reshape(-1, 15)
    a0, tau = fp.draw_flow_noise(4, rng)
    zeroed = fp.init_params(0)
    for name in ("trunk_w3", "trunk_b3"):
        zeroed.tensors[name].data[:] = 0.0
    feats = fp.encode_batch(zeroed, Tensor(fp.normalize_images(images)),
                            tokens, proprio)
    loss = fp.flow_loss_given(zeroed, feats, a1, a0, tau)
    assert loss.item() == pytest.approx(np.mean((a0 - a1) ** 2), rel=1e-12)


def test_flow_loss_nonnegative(params):
    rng = np.random.default_rng(4)
    batch = _batch(rng)
    loss = fp.flow_loss(params, batch, np.random.default_rng(0))
    assert loss.item() >= 0.0


def test_flow_loss_rejects_empty_batch(params):
    with pytest.raises(ValueError):
        fp.flow_loss(params, (np.zeros((0, 32, 32, 3)), [], np.zeros((0, 3)),
                              np.zeros((0, 5, 3))), np.random.default_rng(0))


def test_flow_loss_parameter_gradients_match_finite_differences(params):
    rng = np.random.default_rng(5)
    images, tokens, proprio, actions = _batch(rng)
    a0, tau = fp.draw_flow_noise(4, np.random.default_rng(6))

    def build():
        feats = fp.encode_batch(params, Tensor(fp.normalize_images(images)),
                                tokens, proprio)
        return fp.flow_loss_given(params, feats, actions, a0, tau)

    for name in sorted(params.tensors):
        err = gc.check_gradient(build, params.tensors[name], max_entries=8,
                                seed=7)
        assert err < 1e-5, f"{name}: rel err {err:.2e}"


# ---------------------------------------------------------------------------
# encoder


def test_encode_deterministic(params, obs):
    a = fp.encode(params, obs).data
    b = fp.encode(params, obs).data
    np.testing.assert_array_equal(a, b)


def test_encode_feature_dim(params, obs):
    assert fp.encode(params, obs).shape == (96,)


def test_encode_all_pad_tokens_equals_pad_embedding(params, obs):
    padded = sim.Observation(image=obs.image, proprio=obs.proprio,
                             tokens=np.zeros(12, dtype=np.int64))
    feat = fp.encode(params, padded).data
    pad_row = params["tok_embed"].data[sim.PAD_ID]
    np.testing.assert_allclose(feat[64:80], pad_row, rtol=1e-12)


def test_encode_black_vs_white_images_differ(params, obs):
    black = sim.Observation(image=np.zeros_like(obs.image),
                            proprio=obs.proprio, tokens=obs.tokens)
    white = sim.Observation(image=np.full_like(obs.image, 255),
                            proprio=obs.proprio, tokens=obs.tokens)
    fb = fp.encode(params, black).data[:64]
    fw = fp.encode(params, white).data[:64]
    assert not np.allclose(fb, fw)


def test_encode_rejects_out_of_vocab_token(params, obs):
    bad = sim.Observation(image=obs.image, proprio=obs.proprio,
                          tokens=np.array([fp.VOCAB_SIZE + 3]))
    with pytest.raises(LookupError):
        fp.encode(params, bad)


def test_normalize_images_range_and_layout():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    img[0, 1, 2] = 255
    out = fp.normalize_images(img)
    assert out.shape == (1, 3, 32, 32)
    assert out[0, 2, 0, 1] == 1.0
    assert out.min() == 0.0


# ---------------------------------------------------------------------------
# sampling


def test_straight_flow_oracle_recovers_target(params, obs):
    """Euler against the analytic single-datapoint field v = (A - a*)/(1 - tau)
    lands exactly on a* for any step count (the flow is a straight line)."""
    rng = np.random.default_rng(8)
    a_star = rng.uniform(-0.9, 0.9, size=15)

    def field(a_flat, tau):
        return (a_flat - a_star) / (1.0 - tau)

    for n_steps in (1, 5, 10):
        out = fp.sample_actions(params, obs, n_steps, sim.rng_for(0, 11),
                                velocity_fn=field)
        assert np.abs(out.reshape(-1) - a_star).max() < 1e-10, n_steps


def test_sample_actions_single_step_unrolls(params, obs):
    a0 = sim.rng_for(5, 11).normal(0.0, 1.0, size=15)
    feats = fp.encode(params, obs).data.reshape(1, -1)
    v = fp.velocity(params, Tensor(feats), Tensor(a0.reshape(1, 15)),
                    np.array([0.0])).data.reshape(15)
    expect = np.clip(a0 - v, -1.0, 1.0).reshape(5, 3)
    got = fp.sample_actions(params, obs, 1, sim.rng_for(5, 11))
    np.testing.assert_allclose(got, expect, rtol=1e-12)


def test_sample_actions_deterministic(params, obs):
    a = fp.sample_actions(params, obs, 10, sim.rng_for(1, 11))
    b = fp.sample_actions(params, obs, 10, sim.rng_for(1, 11))
    np.testing.assert_array_equal(a, b)


def test_sample_actions_output_contract(params, obs):
    out = fp.sample_actions(params, obs, 10, sim.rng_for(2, 11))
    assert out.shape == (5, 3)
    assert np.abs(out).max() <= 1.0


def test_sample_actions_rejects_zero_steps(params, obs):
    with pytest.raises(ValueError):
        fp.sample_actions(params, obs, 0, sim.rng_for(0, 11))


# ---------------------------------------------------------------------------
# checkpoints


def test_policy_checkpoint_roundtrip_bit_exact(tmp_path, params):
    m, p = tmp_path / "c.manifest", tmp_path / "c.bin"
    params.save(m, p)
    loaded = fp.PolicyParams.load(m, p)
    assert loaded.head == params.head
    assert sorted(loaded.tensors) == sorted(params.tensors)
    for name, t in params.items():
        np.testing.assert_array_equal(loaded[name].data, t.data)


def test_policy_checkpoint_metadata(tmp_path):
    params = fp.init_params(1, head="token")
    m, p = tmp_path / "t.manifest", tmp_path / "t.bin"
    params.save(m, p)
    _, meta = gc.load_tensors(m, p)
    assert meta["head"] == "token"
    assert int(meta["bins"]) == fp.N_BINS
    assert int(meta["chunk_len"]) == sim.CHUNK_LEN


# ---------------------------------------------------------------------------
# discrete head


def test_discretize_edges():
    assert fp.discretize(np.array(-1.0)) == 0
    assert fp.discretize(np.array(1.0)) == 63
    assert fp.discretize(np.array(0.0)) == 32


@given(st.floats(-1.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_discretize_in_range(a):
    b = int(fp.discretize(np.array(a)))
    assert 0 <= b < fp.N_BINS


def test_token_loss_uniform_logits_is_ln_bins():
    params = fp.init_params(2, head="token")
    for name in ("tok_head_w1", "tok_head_b1", "tok_head_w2", "tok_head_b2"):
        params.tensors[name].data[:] = 0.0
    rng = np.random.default_rng(9)
    batch = _batch(rng, n=2)
    loss = fp.token_loss(params, batch)
    assert loss.item() == pytest.approx(np.log(fp.N_BINS), rel=1e-12)


def test_token_loss_zero_delta_equals_plain(params):
    tparams = fp.init_params(3, head="token")
    rng = np.random.default_rng(10)
    batch = _batch(rng, n=2)
    plain = fp.token_loss(tparams, batch).item()
    with_zero = fp.token_loss(tparams, batch, delta=np.zeros((2, 15))).item()
    assert plain == with_zero


def test_token_loss_rejects_oversize_delta():
    tparams = fp.init_params(4, head="token")
    rng = np.random.default_rng(11)
    batch = _batch(rng, n=2)
    with pytest.raises(ValueError):
        fp.token_loss(tparams, batch, delta=np.full((2, 15), 2 * fp.BIN_WIDTH))


def test_adjacent_bin_contract_exhaustive_edge_grid():
    """|delta| <= bin width moves any target bin by at most 1 -- checked on a
    dense grid straddling every bin edge plus the interval endpoints."""
    edges = np.linspace(-1.0, 1.0, fp.N_BINS + 1)
    probes = np.unique(np.concatenate([
        edges, edges - 1e-9, edges + 1e-9,
        np.linspace(-1, 1, 257),
    ]))
    probes = probes[(probes >= -1.0) & (probes <= 1.0)]
    for delta in (-fp.BIN_WIDTH, -fp.BIN_WIDTH / 2, fp.BIN_WIDTH / 2,
                  fp.BIN_WIDTH):
        a = probes
        b = np.clip(a + delta, -1.0, 1.0)
        shift = np.abs(fp.discretize(b) - fp.discretize(a))
        assert shift.max() <= 1


def test_token_logits_requires_token_head(params):
    feats = Tensor(np.zeros((1, fp.FEATURE_DIM)))
    with pytest.raises(ValueError):
        fp.token_logits(params, feats)
