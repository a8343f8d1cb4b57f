"""Kinematic validity checks and quality scores for motions."""

import logging
import math
from typing import Dict, List, Optional

import numpy as np

import config
from kinematics import GlobalMotion, SkeletonConfig

logger = logging.getLogger(__name__)


class MotionValidator:
    """Validates motions against skeleton constraints and scores their quality."""

    def __init__(self, bone_tolerance: float = 1e-6, floor_tolerance: float = 0.0,
                 turn_tolerance_deg: float = 1.0):
        self.quality_thresholds = {
            'bone_tolerance': bone_tolerance,
            'floor_tolerance': floor_tolerance,
            'turn_tolerance_deg': turn_tolerance_deg,
            'max_speed_m_per_frame': 0.2,
            'min_contact_fraction': 0.05,
        }

    def bone_drift(self, motion: GlobalMotion, skel: SkeletonConfig) -> Dict[str, float]:
        """Max minus min length per rigid bone, keyed 'parent-child'."""
        positions = motion.positions.astype(np.float64)
        drift = {}
        for parent, child in skel.rigid_bones:
            length = np.linalg.norm(positions[:, child] - positions[:, parent], axis=-1)
            drift[f"{parent}-{child}"] = float(length.max() - length.min())
        return drift

    def validate_motion(self, motion: GlobalMotion, skel: SkeletonConfig) -> Dict:
        """Validate a motion, returns status, warnings and a 0-100 quality score."""
        validation = {
            'valid': True,
            'warnings': [],
            'errors': [],
            'quality_score': 100,
            'max_bone_drift': 0.0,
            'min_foot_height': 0.0,
        }

        if motion.num_joints != skel.num_joints:
            validation['errors'].append(
                f"Motion has {motion.num_joints} joints, skeleton '{skel.name}' expects {skel.num_joints}")
            validation['valid'] = False
            validation['quality_score'] = 0
            return validation

        drift = self.bone_drift(motion, skel)
        max_drift = max(drift.values()) if drift else 0.0
        validation['max_bone_drift'] = max_drift
        if max_drift > self.quality_thresholds['bone_tolerance']:
            worst = max(drift, key=drift.get)
            validation['errors'].append(f"Bone {worst} length drifts by {max_drift:.3e} m")
            validation['valid'] = False
            validation['quality_score'] -= 50

        feet = motion.positions[:, skel.foot_joints, 1].astype(np.float64)
        min_height = float(feet.min()) if feet.size else 0.0
        validation['min_foot_height'] = min_height
        if min_height < -self.quality_thresholds['floor_tolerance']:
            validation['errors'].append(f"Foot below the floor ({min_height * 1000:.2f} mm)")
            validation['valid'] = False
            validation['quality_score'] -= 40

        head = motion.positions[:, skel.head_joint].astype(np.float64)
        speed = np.linalg.norm(np.diff(head[:, [0, 2]], axis=0), axis=-1)
        if speed.size and speed.max() > self.quality_thresholds['max_speed_m_per_frame']:
            validation['warnings'].append(f"Head moves {speed.max():.3f} m in one frame")
            validation['quality_score'] -= 20

        if skel.foot_joints:
            low = feet < config.CONTACT_THRESHOLDS['height_m']
            if low.mean() < self.quality_thresholds['min_contact_fraction']:
                validation['warnings'].append("Feet are almost never near the floor")
                validation['quality_score'] -= 10

        validation['quality_score'] = max(0, validation['quality_score'])
        return validation

    def check_turn_consistency(self, motion: GlobalMotion, expected_turn_deg: float) -> Dict:
        """Compare the net heading change (first to last frame) with a scripted turn total."""
        heading = np.unwrap(motion.heading.astype(np.float64))
        actual = math.degrees(float(heading[-1] - heading[0]))
        error = abs(actual - expected_turn_deg)
        return {
            'consistent': error <= self.quality_thresholds['turn_tolerance_deg'],
            'expected_deg': float(expected_turn_deg),
            'actual_deg': actual,
            'error_deg': error,
        }

    def validate_batch(self, motions: List[GlobalMotion], skel: SkeletonConfig,
                       expected_turns_deg: Optional[List[float]] = None) -> Dict:
        """Aggregate validation over many motions."""
        results = [self.validate_motion(m, skel) for m in motions]
        invalid = [i for i, r in enumerate(results) if not r['valid']]
        summary = {
            'total': len(results),
            'invalid': invalid,
            'mean_quality_score': float(np.mean([r['quality_score'] for r in results])) if results else 0.0,
            'max_bone_drift': max((r['max_bone_drift'] for r in results), default=0.0),
            'min_foot_height': min((r['min_foot_height'] for r in results), default=0.0),
            'inconsistent_turns': [],
        }
        if expected_turns_deg is not None:
            for i, (motion, turn) in enumerate(zip(motions, expected_turns_deg)):
                if not self.check_turn_consistency(motion, turn)['consistent']:
                    summary['inconsistent_turns'].append(i)
        if invalid:
            logger.warning(f"{len(invalid)} of {len(results)} motions failed validation")
        return summary
