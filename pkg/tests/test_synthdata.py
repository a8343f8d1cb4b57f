import math

import numpy as np
import pytest
import torch

import config
import synthdata
from kinematics import GlobalMotion
from reasoner import UNKNOWN_WORD_ID
from synthdata import (FeatureNormalizer, MotionScript, Primitive, Scene, SynthDataError, WORD_IDS, _turn_toward,
                       build_dataset, check_samples, decode_features, describe, generate_sample, load_condition,
                       load_dataset, realize, render_condition, sample_script, save_condition, scene_feature,
                       split_ids, to_tensors, tokenize_instruction, verify_regeneration)


def walk_script(speed="steadily", frames=150):
    return MotionScript([Primitive("walk", frames, direction="forward", speed=speed)])


def test_primitive_validation():
    with pytest.raises(SynthDataError):
        Primitive("jump", 30)
    with pytest.raises(SynthDataError):
        Primitive("walk", 30, direction="up", speed="slowly")
    with pytest.raises(SynthDataError):
        Primitive("turn", 30)
    with pytest.raises(SynthDataError):
        Primitive("idle", 0)
    with pytest.raises(SynthDataError):
        MotionScript([])


def test_scripts_fill_the_sequence():
    for seed in range(50):
        script = sample_script(np.random.default_rng(seed))
        frames = [p.frames for p in script.primitives]
        assert sum(frames) == config.SEQUENCE_FRAMES
        assert 2 <= len(frames) <= 4
        assert all(f >= config.MIN_PRIMITIVE_FRAMES and f % config.PRIMITIVE_FRAME_QUANTUM == 0 for f in frames)


def test_scene_steers_the_script(rng):
    blocked = sample_script(rng, Scene(goal_bearing=0.0, obstacle_ahead=True))
    assert blocked.primitives[0].kind == "walk"
    assert blocked.primitives[0].direction in ("left", "right")
    left = sample_script(rng, Scene(goal_bearing=math.pi / 2, ball_present=True))
    assert left.primitives[0].kind == "turn" and left.primitives[0].angle_deg == 90.0
    assert left.primitives[1].kind == "kick"


def test_turn_toward_goal():
    assert _turn_toward(0.1) is None
    assert _turn_toward(-math.pi / 4) == -45.0
    assert _turn_toward(math.pi) == 180.0
    assert _turn_toward(-math.pi) == 180.0


def test_describe_joins_primitives():
    script = MotionScript([
        Primitive("walk", 60, direction="forward", speed="slowly"),
        Primitive("turn", 45, angle_deg=45.0),
        Primitive("turn", 45, angle_deg=180.0),
    ])
    assert describe(script) == ["walk", "forward", "slowly", "then", "turn", "left", "slightly",
                                "then", "turn", "around"]
    kick = MotionScript([Primitive("kick", 30, side="left"), Primitive("bend", 30, depth="a little")])
    assert " ".join(describe(kick)) == "kick with the left foot then bend down a little"


def test_tokenize_instruction():
    ids = tokenize_instruction(["walk", "forward", "moonwalk"])
    assert ids.tolist() == [WORD_IDS["walk"], WORD_IDS["forward"], UNKNOWN_WORD_ID]
    assert len(tokenize_instruction(["walk"] * 100)) == config.MAX_TEXT_LEN


def test_walk_covers_expected_distance(xsens):
    motion = realize(walk_script(), xsens)
    head = motion.positions[:, xsens.head_joint]
    np.testing.assert_allclose(head[-1, [0, 2]], [5.0, 0.0], atol=1e-9)
    assert motion.num_frames == 150
    np.testing.assert_allclose(motion.heading, 0.0)


def test_turn_reaches_scripted_heading(xsens):
    script = MotionScript([Primitive("turn", 60, angle_deg=90.0), Primitive("idle", 90)])
    motion = realize(script, xsens, heading=0.3)
    assert motion.heading[-1] == pytest.approx(0.3 + math.pi / 2)
    head = motion.positions[:, xsens.head_joint]
    np.testing.assert_allclose(head[-1, [0, 2]], head[0, [0, 2]], atol=1e-9)


@pytest.mark.parametrize("angles", [[90.0], [135.0, 135.0], [-45.0, 180.0]])
def test_net_heading_change_equals_scripted_turns(xsens, angles):
    script = MotionScript([Primitive("turn", 150 // len(angles), angle_deg=a) for a in angles])
    motion = realize(script, xsens, heading=0.4)
    assert motion.heading[0] == pytest.approx(0.4)
    change = np.unwrap(motion.heading)[-1] - motion.heading[0]
    assert math.degrees(change) == pytest.approx(script.net_turn_deg, abs=1e-9)


def test_realize_reduces_to_compact_skeleton(compact, xsens):
    script = walk_script(frames=150)
    full = realize(script, xsens)
    small = realize(script, compact)
    assert small.positions.shape == (150, 7, 3)
    np.testing.assert_allclose(small.positions[:, compact.head_joint], full.positions[:, xsens.head_joint])


def test_scene_feature_layout():
    feature = scene_feature(Scene(goal_bearing=0.0, obstacle_ahead=True), seed=3)
    assert feature.shape == (config.IMAGE_FEATURE_DIM,)
    np.testing.assert_allclose(feature[:5], [0.0, 1.0, 1.0, 0.0, 0.0])
    np.testing.assert_array_equal(feature, scene_feature(Scene(goal_bearing=0.0, obstacle_ahead=True), seed=3))
    assert not np.array_equal(feature, scene_feature(Scene(goal_bearing=0.0, obstacle_ahead=True), seed=4))


def test_condition_file(tmp_path, xsens):
    script = walk_script()
    bundle = render_condition(script, Scene(goal_bearing=0.5), xsens, seed=1)
    assert bundle.init_pose.shape == (xsens.feature_dim,)
    path = str(tmp_path / "c.egoc")
    save_condition(path, bundle)
    loaded = load_condition(path)
    np.testing.assert_array_equal(loaded.instruction, bundle.instruction)
    np.testing.assert_array_equal(loaded.image_feature, bundle.image_feature)
    np.testing.assert_allclose(loaded.init_pose, bundle.init_pose)
    with open(path, "r+b") as f:
        f.write(b"WRONG")
    with pytest.raises(SynthDataError):
        load_condition(path)
    with open(path, "wb") as f:
        f.write(b"EGOC1")
    with pytest.raises(SynthDataError):
        load_condition(path)


def test_samples_follow_their_seed(compact):
    a = generate_sample("a", 7, compact)
    b = generate_sample("b", 7, compact)
    np.testing.assert_array_equal(a.motion.positions, b.motion.positions)
    assert describe(a.script) == describe(b.script)
    assert not np.array_equal(a.motion.positions, generate_sample("c", 8, compact).motion.positions)


def test_split_fraction():
    flags = split_ids(1000, seed=0)
    assert int(flags.sum()) == 800
    np.testing.assert_array_equal(flags, split_ids(1000, seed=0))


def test_small_datasets_are_rejected():
    with pytest.raises(SynthDataError):
        build_dataset(9)


def test_dataset_round_trip_and_regeneration(tmp_path):
    out = str(tmp_path / "data")
    dataset = build_dataset(10, seed=3, skeleton="compact7", out_dir=out, workers=0)
    assert len(dataset.train) == 8 and len(dataset.test) == 2
    loaded = load_dataset(out)
    assert [s.sample_id for s in loaded.samples] == [s.sample_id for s in dataset.samples]
    np.testing.assert_allclose(loaded.samples[0].motion.positions, dataset.samples[0].motion.positions, atol=1e-6)
    assert verify_regeneration(out) == []


def test_normalizer_keeps_constant_channels(rng):
    features = rng.normal(size=(4, 10, 3))
    features[..., 1] = 2.0
    normalizer = FeatureNormalizer.fit(features)
    assert normalizer.std[1] == 1.0
    normalized = normalizer.normalize(features)
    assert abs(float(normalized[..., 0].mean())) < 1e-6
    np.testing.assert_allclose(normalizer.denormalize(normalized), features, atol=1e-5)
    as_tensor = normalizer.normalize(torch.as_tensor(features, dtype=torch.float32))
    np.testing.assert_allclose(as_tensor.numpy(), normalized, atol=1e-5)
    restored = FeatureNormalizer.from_dict(normalizer.to_dict())
    np.testing.assert_array_equal(restored.mean, normalizer.mean)


def test_tensors_decode_back_to_motion():
    dataset = build_dataset(10, seed=1, skeleton="compact7", workers=0)
    normalizer = FeatureNormalizer.fit(dataset.features("train"))
    tensors = to_tensors(dataset, "train", normalizer)
    assert tensors.features.shape == (8, 150, dataset.skel.feature_dim)
    assert len(tensors.conditions) == 8 and len(tensors.sample_ids) == 8
    motions = decode_features(tensors.features, normalizer, tensors.init_head, tensors.init_heading, dataset.skel)
    for decoded, original in zip(motions, tensors.motions):
        np.testing.assert_allclose(decoded.positions, original.positions, atol=2e-3)


def test_generated_samples_pass_validation():
    dataset = build_dataset(20, seed=5, skeleton="xsens23", workers=0)
    summary = check_samples(dataset.samples, dataset.skel)
    assert summary["invalid"] == [] and summary["inconsistent_turns"] == []
    assert summary["max_bone_drift"] <= 1e-6


def test_build_dataset_rejects_invalid_motion(monkeypatch):
    scripted = synthdata.realize

    def drifting(script, skel, origin=(0.0, 0.0), heading=0.0):
        motion = scripted(script, skel, origin, heading)
        return GlobalMotion(motion.positions, motion.heading + np.linspace(0.0, 1.0, motion.num_frames), motion.fps)

    monkeypatch.setattr(synthdata, "realize", drifting)
    with pytest.raises(SynthDataError, match="failed validation"):
        build_dataset(10, seed=3, skeleton="compact7", workers=0)
