import json
import math

import numpy as np
import pytest
from scipy import linalg

import config
from kinematics import GlobalMotion
from metrics import (METRIC_KEYS, GaussianStats, MetricError, MetricReport, accel_jerk, evaluate_motions,
                     foot_contact, foot_sliding, frechet_distance, gaussian_stats, mm_dist, plausibility_metrics,
                     r_precision)


def body(frames=30, foot_y=0.0, foot_step=0.0, joints=7, feet=(5, 6)):
    positions = np.zeros((frames, joints, 3))
    positions[:, 2, 1] = 1.6
    for foot in feet:
        positions[:, foot, 1] = foot_y
        positions[:, foot, 0] = foot_step * np.arange(frames)
    return positions


def as_motion(positions):
    return GlobalMotion(positions=positions, heading=np.zeros(len(positions)))


# ----------------------------------------------------------------------------
# distribution

def test_fid_of_identical_sets_is_zero(rng):
    stats = gaussian_stats(rng.normal(size=(500, 6)))
    assert frechet_distance(stats, stats) == pytest.approx(0.0, abs=1e-6)


def test_fid_mean_shift():
    a = GaussianStats(np.zeros(3), np.eye(3), n=10)
    b = GaussianStats(np.array([1.0, 2.0, 2.0]), np.eye(3), n=10)
    assert frechet_distance(a, b) == pytest.approx(9.0, abs=1e-9)


def test_fid_one_dimensional_variances():
    a = GaussianStats(np.zeros(1), np.array([[1.0]]), n=10)
    b = GaussianStats(np.zeros(1), np.array([[4.0]]), n=10)
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=1e-5)


def test_fid_is_symmetric(rng):
    a = gaussian_stats(rng.normal(size=(200, 5)))
    b = gaussian_stats(rng.normal(loc=0.5, scale=2.0, size=(200, 5)))
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-6)
    assert frechet_distance(a, b) > 0


def test_fid_matches_matrix_square_root(rng):
    a = gaussian_stats(rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6)))
    b = gaussian_stats(rng.normal(loc=0.3, size=(300, 6)) @ rng.normal(size=(6, 6)))
    sa = a.cov + config.FID_EPS * np.eye(6)
    sb = b.cov + config.FID_EPS * np.eye(6)
    covmean = np.real(linalg.sqrtm(sa @ sb))
    expected = np.sum((a.mean - b.mean) ** 2) + np.trace(sa + sb - 2.0 * covmean)
    assert frechet_distance(a, b) == pytest.approx(expected, rel=1e-6)


def test_gaussian_stats_validation(rng):
    with pytest.raises(MetricError):
        gaussian_stats(rng.normal(size=(1, 4)))
    with pytest.raises(MetricError):
        GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), n=5)
    with pytest.raises(MetricError):
        frechet_distance(gaussian_stats(rng.normal(size=(10, 3))), gaussian_stats(rng.normal(size=(10, 4))))


# ----------------------------------------------------------------------------
# retrieval

def test_r_precision_perfect_pairs(rng):
    motion = rng.normal(size=(128, 8)) * 10.0
    cond = motion + rng.normal(scale=1e-3, size=motion.shape)
    assert r_precision(motion, cond, batch=32) == 1.0


def test_r_precision_near_chance_for_unrelated_pairs(rng):
    motion = rng.normal(size=(256, 8))
    cond = rng.normal(size=(256, 8))
    assert r_precision(motion, cond, batch=32) < 0.2
    assert r_precision(motion, cond, batch=32, k=32) == 1.0


def test_r_precision_shrinks_small_sets(rng):
    motion = rng.normal(size=(10, 4)) * 10.0
    assert r_precision(motion, motion.copy(), batch=64) == 1.0
    with pytest.raises(MetricError):
        r_precision(motion, motion[:, :3])


def test_mm_dist_constant_offset(rng):
    motion = rng.normal(size=(50, 4))
    offset = np.array([3.0, 0.0, 0.0, 0.0])
    assert mm_dist(motion, motion) == 0.0
    assert mm_dist(motion, motion + offset) == pytest.approx(3.0)


# ----------------------------------------------------------------------------
# physical plausibility

def test_planted_feet_do_not_slide(compact):
    value, missing = foot_sliding(body(), compact)
    assert (value, missing) == (0.0, False)


def test_sliding_feet_report_step_length(compact):
    value, missing = foot_sliding(body(foot_step=0.01), compact)
    assert not missing
    assert value == pytest.approx(0.01)


def test_airborne_feet_have_no_contacts(compact):
    assert foot_sliding(body(foot_y=0.5), compact) == (0.0, True)


def test_foot_contact_in_millimeters(compact):
    assert foot_contact(body(foot_y=0.005), compact) == pytest.approx(5.0)
    assert foot_contact(body(foot_y=-0.01), compact) == pytest.approx(10.0)


def test_accel_and_jerk_closed_forms():
    t = np.arange(20.0)
    still = np.zeros((20, 3, 3))
    linear = still + (0.03 * t)[:, None, None]
    quadratic = still.copy()
    quadratic[..., 0] = (0.5 * 0.002 * t ** 2)[:, None]
    assert accel_jerk(linear) == pytest.approx((0.0, 0.0), abs=1e-12)
    acce, jerk = accel_jerk(quadratic)
    assert acce == pytest.approx(0.002)
    assert jerk == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(MetricError):
        accel_jerk(np.zeros((3, 2, 3)))


def test_plausibility_skips_contactless_motions_for_sliding(compact):
    motions = [as_motion(body(foot_step=0.02)), as_motion(body(foot_y=0.5))]
    result = plausibility_metrics(motions, compact)
    assert result["no_contact"] == 1
    assert result["fs"] == pytest.approx(0.02)
    assert result["fc"] == pytest.approx(250.0)


# ----------------------------------------------------------------------------
# reports

def report(**overrides):
    values = dict(fid=1.5, r_top1=0.4, mm_dist=3.2, fs=0.01, fc=12.0, acce=0.002, jerk=0.001)
    values.update(overrides)
    return MetricReport(**values)


def test_report_rejects_invalid_values():
    with pytest.raises(MetricError):
        report(fid=math.nan)
    with pytest.raises(MetricError):
        report(fs=-0.1)


def test_report_json_file(tmp_path):
    path = str(tmp_path / "report.json")
    original = report(warnings=["1 of 4 motions had no foot contact"])
    original.to_json(path)
    with open(path) as f:
        data = json.load(f)
    assert set(METRIC_KEYS) <= set(data)
    assert data["units"]["fc"] == "mm"
    assert MetricReport.from_json(path) == original


def test_evaluate_motions_assembles_report(compact, rng):
    motions = [as_motion(body(foot_y=0.5)) for _ in range(10)]
    embs = rng.normal(size=(10, 4)) * 10.0
    result = evaluate_motions(motions, compact, embs, embs.copy(), embs.copy(), batch=10)
    assert result.fid == pytest.approx(0.0, abs=1e-6)
    assert result.r_top1 == 1.0
    assert result.mm_dist == 0.0
    assert result.fs == 0.0
    assert result.warnings == ["10 of 10 motions had no foot contact"]
