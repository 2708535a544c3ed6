"""Perturbation library: Monte-Carlo oracles, identities, level scaling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rvla.manipsim as sim
import rvla.uncertainty as unc
from rvla.uncertainty import PerturbationSpec

N = 100_000


def _stream(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# suite structure


def test_suite_has_17_specs():
    assert len(unc.suite_default()) == 17


def test_suite_modality_breakdown():
    suite = unc.suite_default()
    counts = {}
    for sp in suite:
        counts[sp.modality] = counts.get(sp.modality, 0) + 1
    assert counts == {"action": 5, "observation": 6, "environment": 3,
                      "instruction": 3}


def test_suite_roundtrips_through_text_format():
    suite = unc.suite_default()
    suite[0] = PerturbationSpec("uniform_noise", {"sigma": 0.1})
    suite[5] = PerturbationSpec("obs_gaussian_noise", level=0.25)
    assert unc.specs_from_text(unc.specs_to_text(suite)) == suite


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        PerturbationSpec("telekinesis")


def test_unknown_param_rejected():
    with pytest.raises(ValueError):
        PerturbationSpec("uniform_noise", {"tau": 1.0})


def test_spec_text_rejects_malformed_entry():
    with pytest.raises(ValueError):
        unc.specs_from_text("uniform_noise sigma\n")


# ---------------------------------------------------------------------------
# level scaling


@pytest.mark.parametrize("kind", sorted(unc.KINDS))
def test_level_scaling_is_linear_in_level(kind):
    info = unc.KINDS[kind]
    lo = PerturbationSpec(kind, level=0.0).resolved()[info.primary]
    mid = PerturbationSpec(kind, level=0.5).resolved()[info.primary]
    hi = PerturbationSpec(kind, level=1.0).resolved()[info.primary]
    assert lo == 0.0
    assert hi == pytest.approx(info.primary_max)
    assert mid == pytest.approx(0.5 * info.primary_max)


@pytest.mark.parametrize("kind", ["uniform_noise", "gaussian_noise",
                                  "action_bias", "random_flips",
                                  "sudden_spikes"])
def test_level_zero_action_perturbations_are_identities(kind):
    chunk = _stream(1).uniform(-0.9, 0.9, size=(5, 3))
    out = unc.perturb_action(chunk, PerturbationSpec(kind, level=0.0),
                             _stream(2))
    np.testing.assert_array_equal(out, chunk)


# ---------------------------------------------------------------------------
# action perturbations: Monte-Carlo oracles


def test_uniform_noise_moments():
    sigma = 0.04
    base = np.zeros((N, 1, 3))
    out = unc.perturb_action(base, PerturbationSpec("uniform_noise"), _stream(3))
    d = (out - base).ravel()
    se_mean = sigma / np.sqrt(3.0) / np.sqrt(d.size)
    assert abs(d.mean()) < 3 * se_mean
    assert abs(d.std() - sigma / np.sqrt(3.0)) < 3 * se_mean
    assert np.abs(d).max() <= sigma


def test_gaussian_noise_moments():
    sigma = 0.3
    base = np.zeros((N, 1, 3))
    out = unc.perturb_action(base, PerturbationSpec("gaussian_noise"), _stream(4))
    d = (out - base).ravel()
    # clipping at [-1, 1] trims the tails: compare against the clipped
    # analytic moments of N(0, 0.3) instead of the raw ones
    ref = np.clip(_stream(5).normal(0, sigma, size=d.size), -1, 1)
    assert abs(d.mean() - ref.mean()) < 3 * sigma / np.sqrt(d.size) * 2
    assert abs(d.std() - ref.std()) < 3 * sigma / np.sqrt(d.size) * 2


def test_action_bias_exact():
    base = np.zeros((2, 5, 3))
    out = unc.perturb_action(base, PerturbationSpec("action_bias"), _stream(6))
    np.testing.assert_allclose(out, 0.03)


def test_random_flips_two_branch_oracle():
    p = 0.05
    base = np.zeros((N, 1, 3))
    out = unc.perturb_action(base, PerturbationSpec("random_flips"), _stream(7))
    flipped = out.ravel() != 0.0
    frac = flipped.mean()
    se = np.sqrt(p * (1 - p) / flipped.size)
    assert abs(frac - p) < 3 * se
    vals = out.ravel()[flipped]
    assert set(np.unique(vals)) <= {-1.0, 1.0}
    up = (vals == 1.0).mean()
    assert abs(up - 0.5) < 3 * np.sqrt(0.25 / vals.size)


def test_sudden_spikes_fraction_and_magnitude():
    p, sigma = 0.05, 1.0
    base = np.zeros((N, 1, 3))
    out = unc.perturb_action(base, PerturbationSpec("sudden_spikes"), _stream(8))
    hit = out.ravel() != 0.0
    se = np.sqrt(p * (1 - p) / hit.size)
    assert abs(hit.mean() - p) < 3 * se
    # from a zero base, every spike lands at +-sigma (after clipping)
    assert set(np.unique(np.abs(out.ravel()[hit]))) == {sigma}


def test_action_perturbation_clamps_to_unit_box():
    base = np.full((100, 5, 3), 0.99)
    out = unc.perturb_action(base, PerturbationSpec("gaussian_noise"), _stream(9))
    assert np.abs(out).max() <= 1.0


def test_action_perturbation_wrong_modality_rejected():
    with pytest.raises(ValueError):
        unc.perturb_action(np.zeros((5, 3)), PerturbationSpec("dead_pixel"),
                           _stream(0))


def test_action_perturbation_deterministic():
    chunk = _stream(10).uniform(-1, 1, size=(5, 3))
    spec = PerturbationSpec("gaussian_noise")
    a = unc.perturb_action(chunk, spec, sim.rng_for(3, 1))
    b = unc.perturb_action(chunk, spec, sim.rng_for(3, 1))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# observation perturbations


@pytest.fixture(scope="module")
def frame():
    return sim.render(sim.reset(0))


def test_obs_gaussian_noise_moments(frame):
    sigma = 70.0
    flat = np.full((200, 200, 3), 128, dtype=np.uint8)
    out = unc.perturb_image(flat, PerturbationSpec("obs_gaussian_noise"),
                            _stream(11))
    d = out.astype(float) - 128.0
    ref = np.round(np.clip(_stream(12).normal(0, sigma, size=d.size), -128, 127))
    assert abs(d.mean() - ref.mean()) < 3 * sigma / np.sqrt(d.size) * 2
    assert abs(d.std() - ref.std()) < 2.0


def test_dead_pixel_fraction_and_values(frame):
    p = 0.1
    big = np.full((300, 300, 3), 128, dtype=np.uint8)
    out = unc.perturb_image(big, PerturbationSpec("dead_pixel"), _stream(13))
    changed = np.any(out != 128, axis=2)
    se = np.sqrt(p * (1 - p) / changed.size)
    assert abs(changed.mean() - p) < 3 * se
    assert set(np.unique(out[changed])) <= {0, 255}


def test_dead_pixel_p1_saturates(frame):
    out = unc.perturb_image(frame, PerturbationSpec("dead_pixel", {"p": 1.0}),
                            _stream(14))
    assert set(np.unique(out)) <= {0, 255}


def test_blur_single_pixel_matches_naive_stencil():
    img = np.zeros((15, 15, 3), dtype=np.uint8)
    img[7, 7] = 255
    out = unc.perturb_image(img, PerturbationSpec("motion_blur"), _stream(15))
    kern = unc.gaussian_kernel(1.0, 5)
    expect = np.zeros((15, 15))
    for du in range(5):
        for dv in range(5):
            expect[7 - 2 + du, 7 - 2 + dv] = 255.0 * kern[du, dv]
    assert np.abs(out[:, :, 0].astype(float) - expect).max() <= 1.0


def test_blur_kernel_normalized():
    assert unc.gaussian_kernel(1.0, 5).sum() == pytest.approx(1.0)
    assert unc.gaussian_kernel(3.0, 7).sum() == pytest.approx(1.0)


def test_blur_against_naive_convolution_oracle(frame):
    out = unc.perturb_image(frame, PerturbationSpec("motion_blur"), _stream(16))
    kern = unc.gaussian_kernel(1.0, 5)
    k = 2
    pad = np.pad(frame.astype(float), ((k, k), (k, k), (0, 0)), mode="edge")
    expect = np.zeros(frame.shape)
    for i in range(frame.shape[0]):
        for j in range(frame.shape[1]):
            patch = pad[i:i + 5, j:j + 5]
            expect[i, j] = (patch * kern[:, :, None]).sum(axis=(0, 1))
    assert np.abs(out.astype(float) - expect).max() <= 1.0


def test_rotation_zero_is_identity(frame):
    out = unc.perturb_image(frame,
                            PerturbationSpec("image_rotation",
                                             {"max_degrees": 0.0}), _stream(17))
    np.testing.assert_array_equal(out, frame)


def test_shift_zero_is_identity(frame):
    out = unc.perturb_image(frame,
                            PerturbationSpec("image_shift", {"max_shift": 0.0}),
                            _stream(18))
    np.testing.assert_array_equal(out, frame)


def test_rotation_fills_with_background(frame):
    # a 45-degree rotation pushes the corners out of frame
    spec = PerturbationSpec("image_rotation", {"max_degrees": 45.0})
    for seed in range(10):
        out = unc.perturb_image(frame, spec, _stream(100 + seed))
        if not np.array_equal(out, frame):
            corners = [out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]]
            assert any(tuple(c) == (sim.BACKGROUND,) * 3 for c in corners)
            return
    pytest.fail("rotation never moved the image")


def test_observation_perturbations_preserve_shape_and_dtype(frame):
    for kind in ("obs_gaussian_noise", "dead_pixel", "motion_blur",
                 "color_jitter", "image_rotation", "image_shift"):
        out = unc.perturb_image(frame, PerturbationSpec(kind), _stream(19))
        assert out.shape == frame.shape
        assert out.dtype == np.uint8


def test_color_jitter_identity_at_zero_factor(frame):
    out = unc.perturb_image(frame,
                            PerturbationSpec("color_jitter",
                                             {"max_factor": 0.0}), _stream(20))
    # factors collapse to exactly 1; only rounding of the float path remains
    assert np.abs(out.astype(int) - frame.astype(int)).max() <= 1


def test_image_perturbation_wrong_modality_rejected(frame):
    with pytest.raises(ValueError):
        unc.perturb_image(frame, PerturbationSpec("uniform_noise"), _stream(0))


# ---------------------------------------------------------------------------
# instruction perturbations


def _task_tokens():
    return sim.tokenize(sim.instruction_words("red", "square"))


def test_lexical_zero_probability_is_identity():
    toks = _task_tokens()
    out = unc.perturb_instruction(toks,
                                  PerturbationSpec("lexical_transform",
                                                   {"p": 0.0}), _stream(21))
    np.testing.assert_array_equal(out[:12], toks)


def test_lexical_substitutions_from_table_only():
    toks = _task_tokens()
    allowed = set()
    for word, subs in unc.SYNONYMS.items():
        allowed.add(sim.WORD_TO_ID[word])
        allowed.update(sim.WORD_TO_ID[s] for s in subs)
    original = {int(t) for t in toks if t != sim.PAD_ID}
    for seed in range(50):
        out = unc.perturb_instruction(toks, PerturbationSpec("lexical_transform"),
                                      _stream(seed))
        new = {int(t) for t in out if t != sim.PAD_ID} - original
        assert new <= allowed


def test_instruction_task_words_never_altered():
    toks = _task_tokens()
    red, square = sim.WORD_TO_ID["red"], sim.WORD_TO_ID["square"]
    for kind in ("lexical_transform", "syntactic_transform",
                 "adversarial_prompt"):
        for seed in range(30):
            out = unc.perturb_instruction(toks, PerturbationSpec(kind),
                                          _stream(seed))
            ids = set(out.tolist())
            assert red in ids and square in ids


def test_adversarial_prompt_grows_by_1_to_3_tokens():
    toks = _task_tokens()
    base_len = int((toks != sim.PAD_ID).sum())
    distractors = set(unc.DISTRACTOR_IDS) | {sim.UNK_ID}
    grew = False
    for seed in range(30):
        out = unc.perturb_instruction(toks, PerturbationSpec("adversarial_prompt"),
                                      _stream(seed))
        n = int((out != sim.PAD_ID).sum())
        assert 1 <= n - base_len <= 3
        inserted = [int(t) for t in out if t != sim.PAD_ID]
        added = [t for t in inserted if t in distractors]
        assert len(added) >= n - base_len
        grew = True
    assert grew


def test_syntactic_transform_reorders_not_invents():
    toks = _task_tokens()
    out = unc.perturb_instruction(toks, PerturbationSpec("syntactic_transform"),
                                  _stream(23))
    vocab_ids = set(range(sim.VOCAB_SIZE))
    assert set(out.tolist()) <= vocab_ids


def test_instruction_wrong_modality_rejected():
    with pytest.raises(ValueError):
        unc.perturb_instruction(_task_tokens(), PerturbationSpec("dead_pixel"),
                                _stream(0))


# ---------------------------------------------------------------------------
# environment perturbations


def test_force_before_first_onset_is_zero():
    stream = _stream(24)
    sched = unc.init_force_schedule(0.02, stream)
    disp, _ = unc.external_force_step(sched, 0, stream)
    assert disp == (0.0, 0.0)


def test_force_direction_is_plus_x():
    stream = _stream(25)
    sched = unc.init_force_schedule(0.02, stream)
    for t in range(500):
        disp, sched = unc.external_force_step(sched, t, stream)
        if disp != (0.0, 0.0):
            assert disp[0] == pytest.approx(0.02)
            assert disp[1] == 0.0
            return
    pytest.fail("no force window within 500 steps")


def test_force_schedule_window_and_gap_statistics():
    stream = _stream(26)
    sched = unc.init_force_schedule(0.02, stream)
    active = []
    for t in range(10_000):
        disp, sched = unc.external_force_step(sched, t, stream)
        active.append(disp != (0.0, 0.0))
    # run-length encode
    lengths, gaps = [], []
    run, kind = 0, active[0]
    for flag in active:
        if flag == kind:
            run += 1
        else:
            (lengths if kind else gaps).append(run)
            run, kind = 1, flag
    assert lengths and all(3 <= n <= 7 for n in lengths)
    inner_gaps = gaps[1:]  # the first gap is the initial onset delay
    assert inner_gaps and all(33 <= g <= 50 for g in inner_gaps)


def test_lighting_update_cadence():
    prev = sim.DEFAULT_LIGHT
    stream = _stream(27)
    out1 = unc.sample_lighting(prev, 1, stream)
    out2 = unc.sample_lighting(prev, 2, stream)
    assert out1 is prev and out2 is prev


def test_lighting_elevation_fixed_at_45_degrees():
    stream = _stream(28)
    for k in range(20):
        light = unc.sample_lighting(sim.DEFAULT_LIGHT, 3 * k, stream)
        assert light.elevation == pytest.approx(np.pi / 4)


def test_lighting_intensity_gamma_moments():
    stream = _stream(29)
    vals = [unc.sample_lighting(sim.DEFAULT_LIGHT, 0, stream).intensity
            for _ in range(N)]
    # Gamma(1,1): mean 1, var 1
    assert abs(np.mean(vals) - 1.0) < 3.0 / np.sqrt(N)


def test_lighting_zero_strength_is_identity():
    out = unc.sample_lighting(sim.DEFAULT_LIGHT, 0, _stream(30), strength=0.0)
    assert out == sim.DEFAULT_LIGHT


def test_spawn_distractors_adds_three_nonmatching():
    s = sim.reset(0)
    target = s.object_by_id(s.task[0])
    out = unc.spawn_distractors(s, _stream(31))
    assert len(out.objects) == len(s.objects) + 3
    assert out.goal == s.goal
    assert out.object_by_id(s.task[0]) == target
    for obj in out.objects[len(s.objects):]:
        assert (obj.color, obj.shape) != (target.color, target.shape)


def test_perturb_training_observation_rejects_output_side():
    data = sim.generate_dataset(1, 0)
    with pytest.raises(ValueError):
        unc.perturb_training_observation(data.images[0], data.tokens[0],
                                         PerturbationSpec("uniform_noise"),
                                         _stream(0))


@given(st.integers(0, 2**31 - 1),
       st.sampled_from(sorted(k for k, i in unc.KINDS.items()
                              if i.modality == "observation")))
@settings(max_examples=40, deadline=None)
def test_observation_perturbation_determinism(seed, kind):
    img = sim.render(sim.reset(seed % 100))
    a = unc.perturb_image(img, PerturbationSpec(kind), sim.rng_for(seed, 13))
    b = unc.perturb_image(img, PerturbationSpec(kind), sim.rng_for(seed, 13))
    np.testing.assert_array_equal(a, b)
