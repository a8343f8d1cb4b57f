import math

import numpy as np
import pytest

from data_validator import MotionValidator
from kinematics import GlobalMotion
from synthdata import MotionScript, Primitive, realize


def test_scripted_motion_is_valid(xsens):
    script = MotionScript([
        Primitive("walk", 60, direction="forward", speed="quickly"),
        Primitive("turn", 45, angle_deg=-90.0),
        Primitive("kick", 45, side="right"),
    ])
    result = MotionValidator().validate_motion(realize(script, xsens), xsens)
    assert result["valid"], result["errors"]
    assert result["max_bone_drift"] <= 1e-6
    assert result["min_foot_height"] >= 0.0
    assert result["quality_score"] == 100


def test_stretched_bone_is_reported(xsens, motion_factory):
    motion = motion_factory(xsens)
    positions = motion.positions.copy()
    positions[75:, 18] += np.array([0.0, 0.0, 0.01])
    stretched = GlobalMotion(positions=positions, heading=motion.heading)
    result = MotionValidator().validate_motion(stretched, xsens)
    assert not result["valid"]
    assert any("17-18" in e for e in result["errors"])
    assert result["quality_score"] <= 50


def test_feet_below_floor(compact, motion_factory):
    motion = motion_factory(compact)
    positions = motion.positions.copy()
    positions[:, 5, 1] = -0.01
    result = MotionValidator().validate_motion(GlobalMotion(positions=positions, heading=motion.heading), compact)
    assert not result["valid"]
    assert result["min_foot_height"] == pytest.approx(-0.01)
    lenient = MotionValidator(floor_tolerance=0.02).validate_motion(
        GlobalMotion(positions=positions, heading=motion.heading), compact)
    assert not any("floor" in e for e in lenient["errors"])


def test_joint_count_mismatch(xsens, compact, motion_factory):
    result = MotionValidator().validate_motion(motion_factory(compact), xsens)
    assert not result["valid"] and result["quality_score"] == 0


def test_turn_consistency(xsens):
    script = MotionScript([Primitive("turn", 75, angle_deg=135.0), Primitive("turn", 75, angle_deg=135.0)])
    motion = realize(script, xsens)
    check = MotionValidator().check_turn_consistency(motion, 270.0)
    assert check["consistent"]
    assert check["actual_deg"] == pytest.approx(270.0, abs=1e-6)
    assert not MotionValidator().check_turn_consistency(motion, 90.0)["consistent"]


def test_batch_summary(xsens):
    validator = MotionValidator()
    scripts = [MotionScript([Primitive("turn", 150, angle_deg=a)]) for a in (45.0, -90.0)]
    motions = [realize(s, xsens, heading=0.5) for s in scripts]
    summary = validator.validate_batch(motions, xsens, expected_turns_deg=[45.0, 90.0])
    assert summary["total"] == 2
    assert summary["invalid"] == []
    assert summary["inconsistent_turns"] == [1]
    assert summary["max_bone_drift"] <= 1e-6
    assert math.isfinite(summary["mean_quality_score"])
