"""Motion quality metrics: distribution, retrieval and physical plausibility."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

import config
from kinematics import GlobalMotion, SkeletonConfig

logger = logging.getLogger(__name__)

METRIC_KEYS = ("fid", "r_top1", "mm_dist", "fs", "fc", "acce", "jerk")
METRIC_UNITS = {
    "fid": "embedding units^2",
    "r_top1": "fraction",
    "mm_dist": "embedding units",
    "fs": "m/contact-frame",
    "fc": "mm",
    "acce": "m/frame^2",
    "jerk": "m/frame^3",
}
LOWER_IS_BETTER = {"fid": True, "r_top1": False, "mm_dist": True, "fs": True, "fc": True,
                   "acce": True, "jerk": True}


class MetricError(ValueError):
    """Metric precondition violated."""


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.n < 2:
            raise MetricError(f"Gaussian statistics need at least 2 samples, got {self.n}")
        if self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise MetricError(f"Covariance {self.cov.shape} does not match mean {self.mean.shape}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9):
            raise MetricError("Covariance is not symmetric")


def gaussian_stats(activations: np.ndarray) -> GaussianStats:
    """Mean and covariance of (n, d) activations."""
    activations = np.asarray(activations, dtype=np.float64)
    if activations.ndim != 2 or activations.shape[0] < 2:
        raise MetricError(f"Need (n >= 2, d) activations, got {activations.shape}")
    cov = np.cov(activations, rowvar=False)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(np.mean(activations, axis=0), cov, activations.shape[0])


def _psd_sqrt(matrix: np.ndarray, tol: float) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    if values.min() < -tol:
        raise MetricError(f"Matrix is not PSD (min eigenvalue {values.min():.3e})")
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(a: GaussianStats, b: GaussianStats, eps: float = config.FID_EPS,
                     tol: float = config.PSD_TOLERANCE) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^1/2) with eps * I added to both covariances."""
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"Dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    d = a.mean.shape[0]
    sa = a.cov + eps * np.eye(d)
    sb = b.cov + eps * np.eye(d)
    root_a = _psd_sqrt(sa, tol)
    inner = root_a @ sb @ root_a
    inner = 0.5 * (inner + inner.T)
    values = linalg.eigvalsh(inner)
    if values.min() < -tol:
        raise MetricError(f"Covariance product is not PSD (min eigenvalue {values.min():.3e})")
    trace_sqrt = float(np.sum(np.sqrt(np.clip(values, 0.0, None))))
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * trace_sqrt)


def euclidean_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise distances between rows of a (n, d) and b (m, d)."""
    d1 = -2.0 * a @ b.T
    d2 = np.sum(np.square(a), axis=1, keepdims=True)
    d3 = np.sum(np.square(b), axis=1)
    return np.sqrt(np.clip(d1 + d2 + d3, 0.0, None))


def r_precision(motion_embs: np.ndarray, cond_embs: np.ndarray, batch: int = config.RETRIEVAL_BATCH,
                k: int = 1, seed: int = 0, shuffle: bool = True) -> float:
    """Fraction of motions whose own condition is among the k nearest in shuffled batches."""
    motion_embs = np.asarray(motion_embs, dtype=np.float64)
    cond_embs = np.asarray(cond_embs, dtype=np.float64)
    n = motion_embs.shape[0]
    if cond_embs.shape != motion_embs.shape:
        raise MetricError(f"Embedding shapes differ: {motion_embs.shape} vs {cond_embs.shape}")
    if n < batch:
        logger.warning(f"Only {n} pairs for retrieval batch {batch}; shrinking batch to {n}")
        batch = n
    if batch < 1:
        raise MetricError("No pairs to evaluate")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    hits = []
    for start in range(0, n - batch + 1, batch):
        idx = order[start:start + batch]
        dist = euclidean_distance_matrix(motion_embs[idx], cond_embs[idx])
        ranking = np.argsort(dist, axis=1, kind="stable")[:, :k]
        hits.append(np.any(ranking == np.arange(batch)[:, None], axis=1))
    return float(np.mean(np.concatenate(hits)))


def mm_dist(motion_embs: np.ndarray, cond_embs: np.ndarray) -> float:
    """Mean distance between each motion embedding and its own condition embedding."""
    diff = np.asarray(motion_embs, dtype=np.float64) - np.asarray(cond_embs, dtype=np.float64)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def _positions(motion: Union[GlobalMotion, np.ndarray]) -> np.ndarray:
    if isinstance(motion, GlobalMotion):
        return motion.positions.astype(np.float64)
    return np.asarray(motion, dtype=np.float64)


def contact_frames(feet: np.ndarray, h_thresh: float, v_thresh: float) -> np.ndarray:
    """(N, F, 3) foot trajectories -> (N, F) contact flags (low and vertically still)."""
    height = feet[..., 1]
    speed = np.empty_like(height)
    speed[1:] = np.abs(height[1:] - height[:-1])
    speed[0] = speed[1] if len(height) > 1 else 0.0
    return (height < h_thresh) & (speed < v_thresh)


def foot_sliding(motion: Union[GlobalMotion, np.ndarray], skel: SkeletonConfig,
                 h_thresh: float = config.CONTACT_THRESHOLDS["height_m"],
                 v_thresh: float = config.CONTACT_THRESHOLDS["vertical_speed_m_per_frame"]) -> Tuple[float, bool]:
    """Mean XZ foot displacement between consecutive contact frames.

    Returns (value, no_contact); no_contact is True when no consecutive
    contact frames exist, in which case the value is 0.
    """
    if not skel.foot_joints:
        raise MetricError("Skeleton has no foot joints")
    feet = _positions(motion)[:, skel.foot_joints, :]
    contact = contact_frames(feet, h_thresh, v_thresh)
    pairs = contact[1:] & contact[:-1]
    if not pairs.any():
        logger.warning("No foot contact frames found; foot sliding reported as 0")
        return 0.0, True
    step = np.linalg.norm(feet[1:, :, [0, 2]] - feet[:-1, :, [0, 2]], axis=-1)
    return float(step[pairs].mean()), False


def foot_contact(motion: Union[GlobalMotion, np.ndarray], skel: SkeletonConfig) -> float:
    """Mean |y| of foot joints, in millimeters."""
    feet = _positions(motion)[:, skel.foot_joints, :]
    return float(np.mean(np.abs(feet[..., 1])) * 1000.0)


def accel_jerk(motion: Union[GlobalMotion, np.ndarray]) -> Tuple[float, float]:
    """Mean per-joint acceleration (central) and jerk (forward) norms in m/frame^2, m/frame^3."""
    p = _positions(motion)
    if p.shape[0] < 4:
        raise MetricError(f"Acceleration and jerk need at least 4 frames, got {p.shape[0]}")
    acc = p[2:] - 2.0 * p[1:-1] + p[:-2]
    jerk = p[3:] - 3.0 * p[2:-1] + 3.0 * p[1:-2] - p[:-3]
    return float(np.linalg.norm(acc, axis=-1).mean()), float(np.linalg.norm(jerk, axis=-1).mean())


@dataclass
class MetricReport:
    fid: float
    r_top1: float
    mm_dist: float
    fs: float
    fc: float
    acce: float
    jerk: float
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        for key in METRIC_KEYS:
            value = getattr(self, key)
            if not math.isfinite(value):
                raise MetricError(f"Metric '{key}' is not finite: {value}")
        for key in ("fs", "fc", "acce", "jerk"):
            if getattr(self, key) < 0:
                raise MetricError(f"Metric '{key}' must be nonnegative")

    def to_dict(self) -> Dict:
        data = {key: float(getattr(self, key)) for key in METRIC_KEYS}
        data["units"] = dict(METRIC_UNITS)
        data["warnings"] = list(self.warnings)
        return data

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=False)
        if path:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: Dict) -> "MetricReport":
        return cls(**{key: float(data[key]) for key in METRIC_KEYS}, warnings=list(data.get("warnings", [])))

    @classmethod
    def from_json(cls, path: str) -> "MetricReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def plausibility_metrics(motions: Sequence[GlobalMotion], skel: SkeletonConfig) -> Dict:
    """FS, FC, Acce and Jerk averaged over motions; FS over motions with contacts only."""
    fs_values, fc_values, acc_values, jerk_values = [], [], [], []
    no_contact = 0
    for motion in motions:
        fs, missing = foot_sliding(motion, skel)
        if missing:
            no_contact += 1
        else:
            fs_values.append(fs)
        fc_values.append(foot_contact(motion, skel))
        acce, jerk = accel_jerk(motion)
        acc_values.append(acce)
        jerk_values.append(jerk)
    return {
        "fs": float(np.mean(fs_values)) if fs_values else 0.0,
        "fc": float(np.mean(fc_values)),
        "acce": float(np.mean(acc_values)),
        "jerk": float(np.mean(jerk_values)),
        "no_contact": no_contact,
    }


def evaluate_motions(generated: Sequence[GlobalMotion], skel: SkeletonConfig,
                     generated_embs: np.ndarray, reference_embs: np.ndarray,
                     condition_embs: np.ndarray, batch: int = config.RETRIEVAL_BATCH,
                     seed: int = 0) -> MetricReport:
    """Assemble a MetricReport from generated motions and evaluator embeddings.

    FID compares generated against reference motion embeddings; R@Top1 and
    MM-Dist pair each generated motion with its own condition embedding.
    """
    fid = frechet_distance(gaussian_stats(generated_embs), gaussian_stats(reference_embs))
    r_top1 = r_precision(generated_embs, condition_embs, batch=batch, k=1, seed=seed)
    distance = mm_dist(generated_embs, condition_embs)
    physical = plausibility_metrics(generated, skel)
    warnings = []
    if physical["no_contact"]:
        warnings.append(f"{physical['no_contact']} of {len(generated)} motions had no foot contact")
    return MetricReport(fid=fid, r_top1=r_top1, mm_dist=distance, fs=physical["fs"], fc=physical["fc"],
                        acce=physical["acce"], jerk=physical["jerk"], warnings=warnings)
