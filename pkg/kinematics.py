"""Head-centric motion features, yaw/6D rotation codecs and motion file I/O."""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

import config

logger = logging.getLogger(__name__)

MOTION_MAGIC = b"EGOM1"
MOTION_HEADER = struct.Struct("<5sIIfB")
DEGENERATE_NORM = 1e-8


class KinematicsError(ValueError):
    """Invalid motion, skeleton or feature layout."""


class MotionFileError(KinematicsError):
    """Malformed motion file."""


@dataclass
class SkeletonConfig:
    """Joint count, head and foot indices and frame rate."""

    num_joints: int
    head_joint: int
    foot_joints: List[int]
    fps: float = 30.0
    joint_names: List[str] = field(default_factory=list)
    parents: List[int] = field(default_factory=list)
    rigid_bones: List[List[int]] = field(default_factory=list)
    name: str = "custom"

    def __post_init__(self):
        if self.num_joints < 2:
            raise KinematicsError(f"Skeleton needs at least 2 joints, got {self.num_joints}")
        if self.fps <= 0:
            raise KinematicsError(f"fps must be positive, got {self.fps}")
        for index in [self.head_joint] + list(self.foot_joints):
            if not 0 <= index < self.num_joints:
                raise KinematicsError(f"Joint index {index} outside [0, {self.num_joints})")

    @property
    def feature_dim(self) -> int:
        return 3 * self.num_joints + 8

    @classmethod
    def from_name(cls, name: str) -> "SkeletonConfig":
        """Build a skeleton from the config.SKELETONS table."""
        if name not in config.SKELETONS:
            raise KinematicsError(f"Unknown skeleton '{name}'. Known: {sorted(config.SKELETONS)}")
        spec = config.SKELETONS[name]
        parents = list(spec["parents"])
        if spec["rigid_bones"] == "parents":
            rigid = [[p, j] for j, p in enumerate(parents) if p >= 0]
        else:
            rigid = [list(b) for b in spec["rigid_bones"]]
        return cls(
            num_joints=len(spec["joints"]),
            head_joint=spec["head_joint"],
            foot_joints=list(spec["foot_joints"]),
            fps=spec["fps"],
            joint_names=list(spec["joints"]),
            parents=parents,
            rigid_bones=rigid,
            name=name,
        )


@dataclass
class GlobalMotion:
    """World-space joint positions (N, J, 3), Y up, plus per-frame head heading."""

    positions: np.ndarray
    heading: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        self.heading = np.asarray(self.heading)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 3:
            raise KinematicsError(f"positions must be (N, J, 3), got {self.positions.shape}")
        if self.heading.shape != (self.positions.shape[0],):
            raise KinematicsError(
                f"heading must have one yaw per frame ({self.positions.shape[0]}), got {self.heading.shape}")
        if self.num_frames < 2:
            raise KinematicsError(f"Motion needs at least 2 frames, got {self.num_frames}")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.heading))):
            raise KinematicsError("Motion contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def num_joints(self) -> int:
        return self.positions.shape[1]


@dataclass
class HeadCentricSequence:
    """Feature frames laid out as [v_xz (2), r_delta (6), p_local (3J)]."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2 or (self.features.shape[1] - 8) % 3 != 0 or self.features.shape[1] < 14:
            raise KinematicsError(f"Feature width must be 3J+8 with J >= 2, got shape {self.features.shape}")

    @property
    def num_joints(self) -> int:
        return (self.features.shape[1] - 8) // 3

    @property
    def velocity(self) -> np.ndarray:
        return self.features[:, 0:2]

    @property
    def rotation_delta(self) -> np.ndarray:
        return self.features[:, 2:8]

    @property
    def local_positions(self) -> np.ndarray:
        return self.features[:, 8:].reshape(len(self.features), -1, 3)


def yaw_matrix(yaw) -> np.ndarray:
    """Rotation about +Y; yaw 0 faces world +X. Accepts scalars or arrays."""
    yaw = np.asarray(yaw, dtype=np.float64)
    c, s = np.cos(yaw), np.sin(yaw)
    zeros, ones = np.zeros_like(yaw), np.ones_like(yaw)
    rows = [
        np.stack([c, zeros, s], axis=-1),
        np.stack([zeros, ones, zeros], axis=-1),
        np.stack([-s, zeros, c], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def rot_to_6d(yaw) -> np.ndarray:
    """First two columns of the yaw rotation, column-major flattened."""
    rot = yaw_matrix(yaw)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def sixd_to_rot(sixd) -> np.ndarray:
    """Gram-Schmidt orthonormalization of a (..., 6) vector into (..., 3, 3)."""
    sixd = np.asarray(sixd, dtype=np.float64)
    if sixd.shape[-1] != 6:
        raise KinematicsError(f"6D rotation must have 6 components, got {sixd.shape[-1]}")
    if not np.all(np.isfinite(sixd)):
        raise KinematicsError("6D rotation contains non-finite values")
    a1, a2 = sixd[..., 0:3], sixd[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < DEGENERATE_NORM):
        raise KinematicsError("Degenerate 6D rotation: first column has near-zero norm")
    b1 = a1 / n1
    a2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n2 < DEGENERATE_NORM):
        raise KinematicsError("Degenerate 6D rotation: second column is parallel to the first")
    b2 = a2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def yaw_from_rot(rot) -> np.ndarray:
    """Heading of the rotated +X axis, projected onto the floor."""
    rot = np.asarray(rot, dtype=np.float64)
    return np.arctan2(-rot[..., 2, 0], rot[..., 0, 0])


def wrap_angle(angle):
    """Wrap radians into (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def _floor_anchor(head: np.ndarray) -> np.ndarray:
    """Local positions are taken relative to (head_x, 0, head_z), not the head itself.

    The head's own p_local entry then carries its height, so vertical head
    travel survives the round trip.
    """
    anchor = head.copy()
    anchor[..., 1] = 0.0
    return anchor


def to_headcentric(motion: GlobalMotion, skel: SkeletonConfig, dtype=np.float32) -> HeadCentricSequence:
    """Encode world motion as head-centric features (N, 3J+8)."""
    if motion.num_joints != skel.num_joints:
        raise KinematicsError(f"Motion has {motion.num_joints} joints, skeleton expects {skel.num_joints}")
    if motion.num_frames < 2:
        raise KinematicsError("Head-centric encoding needs at least 2 frames")

    positions = motion.positions.astype(np.float64)
    heading = motion.heading.astype(np.float64)
    n = motion.num_frames
    head = positions[:, skel.head_joint, :]

    features = np.zeros((n, skel.feature_dim), dtype=np.float64)

    # v_xz: displacement in the previous frame's heading frame
    inv_prev = yaw_matrix(-heading[:-1])
    step = head[1:] - head[:-1]
    step[:, 1] = 0.0
    local_step = np.einsum("nij,nj->ni", inv_prev, step)
    features[1:, 0] = local_step[:, 0]
    features[1:, 1] = local_step[:, 2]

    features[0, 2:8] = rot_to_6d(0.0)
    features[1:, 2:8] = rot_to_6d(heading[1:] - heading[:-1])

    inv_cur = yaw_matrix(-heading)
    rel = positions - _floor_anchor(head)[:, None, :]
    local = np.einsum("nij,nkj->nki", inv_cur, rel)
    features[:, 8:] = local.reshape(n, -1)

    return HeadCentricSequence(features.astype(dtype))


def from_headcentric(seq: HeadCentricSequence, init_head_position, init_heading: float,
                     skel: SkeletonConfig) -> GlobalMotion:
    """Integrate head-centric features back into world motion.

    Frame 0 is placed at the floor projection of ``init_head_position``; its
    velocity and rotation-delta entries are ignored. The head height comes
    from the features themselves.
    """
    features = np.asarray(seq.features, dtype=np.float64)
    if features.shape[1] != skel.feature_dim:
        raise KinematicsError(
            f"Feature width {features.shape[1]} does not match skeleton width {skel.feature_dim}")
    n = features.shape[0]
    if n < 2:
        raise KinematicsError("Decoding needs at least 2 frames")

    yaw_delta = yaw_from_rot(sixd_to_rot(features[1:, 2:8]))
    heading = np.empty(n, dtype=np.float64)
    heading[0] = float(init_heading)
    heading[1:] = float(init_heading) + np.cumsum(yaw_delta)

    local_step = np.zeros((n - 1, 3), dtype=np.float64)
    local_step[:, 0] = features[1:, 0]
    local_step[:, 2] = features[1:, 1]
    world_step = np.einsum("nij,nj->ni", yaw_matrix(heading[:-1]), local_step)

    anchor = np.zeros((n, 3), dtype=np.float64)
    start = np.asarray(init_head_position, dtype=np.float64)
    anchor[0] = [start[0], 0.0, start[2]]
    anchor[1:] = anchor[0] + np.cumsum(world_step, axis=0)

    local = features[:, 8:].reshape(n, skel.num_joints, 3)
    positions = anchor[:, None, :] + np.einsum("nij,nkj->nki", yaw_matrix(heading), local)
    return GlobalMotion(positions=positions, heading=heading, fps=skel.fps)


def estimate_heading(positions: np.ndarray, head_joint: int) -> np.ndarray:
    """Heading from horizontal head displacement, held through stationary frames."""
    head = np.asarray(positions, dtype=np.float64)[:, head_joint, :]
    n = head.shape[0]
    heading = np.zeros(n, dtype=np.float64)
    current = 0.0
    for t in range(n):
        nxt = min(t + 1, n - 1)
        prv = nxt - 1
        dx, dz = head[nxt, 0] - head[prv, 0], head[nxt, 2] - head[prv, 2]
        if np.hypot(dx, dz) > 1e-6:
            current = float(np.arctan2(-dz, dx))
        heading[t] = current
    return heading


def save_motion(path: str, motion: GlobalMotion, include_heading: bool = True) -> None:
    """Write a motion in the binary EGOM1 layout."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    header = MOTION_HEADER.pack(MOTION_MAGIC, motion.num_joints, motion.num_frames,
                                float(motion.fps), 1 if include_heading else 0)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(motion.positions, dtype="<f4").tobytes())
        if include_heading:
            f.write(np.ascontiguousarray(motion.heading, dtype="<f4").tobytes())


def load_motion(path: str, head_joint: Optional[int] = None) -> GlobalMotion:
    """Read an EGOM1 motion file. Missing heading is estimated from head travel."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < MOTION_HEADER.size:
        raise MotionFileError(f"{path}: truncated header")
    magic, num_joints, num_frames, fps, has_heading = MOTION_HEADER.unpack_from(blob, 0)
    if magic != MOTION_MAGIC:
        raise MotionFileError(f"{path}: bad magic {magic!r}")
    count = num_frames * num_joints * 3
    expected = MOTION_HEADER.size + 4 * (count + (num_frames if has_heading else 0))
    if len(blob) != expected:
        raise MotionFileError(f"{path}: expected {expected} bytes, found {len(blob)}")

    positions = np.frombuffer(blob, dtype="<f4", count=count, offset=MOTION_HEADER.size)
    positions = positions.reshape(num_frames, num_joints, 3).astype(np.float32)
    if has_heading:
        heading = np.frombuffer(blob, dtype="<f4", count=num_frames,
                                offset=MOTION_HEADER.size + 4 * count).astype(np.float32)
    else:
        if head_joint is None:
            raise MotionFileError(f"{path}: no heading stored and no head joint given to estimate it")
        logger.warning(f"{path}: heading missing, estimating from head displacement")
        heading = estimate_heading(positions, head_joint).astype(np.float32)
    return GlobalMotion(positions=positions, heading=heading, fps=fps)


def motion_to_frame(motion: GlobalMotion) -> pd.DataFrame:
    """Flatten a motion into one row per frame."""
    n, j = motion.num_frames, motion.num_joints
    columns = [f"j{k}_{axis}" for k in range(j) for axis in ("x", "y", "z")]
    df = pd.DataFrame(motion.positions.reshape(n, j * 3), columns=columns)
    df["heading"] = motion.heading
    df.index.name = "frame"
    return df


def save_motion_csv(path: str, motion: GlobalMotion) -> None:
    """CSV mirror of the binary layout, for debugging."""
    df = motion_to_frame(motion)
    with open(path, "w", newline="") as f:
        f.write(f"# fps={motion.fps}\n")
        df.to_csv(f)


def load_motion_csv(path: str, head_joint: Optional[int] = None) -> GlobalMotion:
    """Read a motion exported with save_motion_csv."""
    fps = config.SEQUENCE_FPS
    with open(path) as f:
        first = f.readline()
    if first.startswith("# fps="):
        fps = float(first.split("=", 1)[1])
    df = pd.read_csv(path, comment="#", index_col="frame")
    joint_columns = [c for c in df.columns if c.startswith("j")]
    if len(joint_columns) % 3 != 0 or not joint_columns:
        raise MotionFileError(f"{path}: joint columns must come in x/y/z triples")
    positions = df[joint_columns].to_numpy(dtype=np.float64).reshape(len(df), -1, 3)
    if "heading" in df.columns:
        heading = df["heading"].to_numpy(dtype=np.float64)
    elif head_joint is not None:
        heading = estimate_heading(positions, head_joint)
    else:
        raise MotionFileError(f"{path}: no heading column and no head joint given to estimate it")
    return GlobalMotion(positions=positions, heading=heading, fps=fps)
