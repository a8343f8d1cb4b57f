"""Procedural paired data: scenes, motion scripts, stick-figure realization and datasets on disk."""

import json
import logging
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

import config
from data_validator import MotionValidator
from kinematics import (GlobalMotion, HeadCentricSequence, SkeletonConfig, from_headcentric,
                        load_motion, save_motion, to_headcentric, wrap_angle)
from reasoner import UNKNOWN_WORD_ID, BundleBatch, ConditionBundle, collate_bundles

logger = logging.getLogger(__name__)

PRIMITIVE_KINDS = ("idle", "walk", "turn", "bend", "kick")
RANDOM_KIND_WEIGHTS = (0.10, 0.35, 0.25, 0.15, 0.15)
SCENE_FLAG_PROBABILITY = 0.3
ORIGIN_RANGE_M = 1.0

# body-frame unit directions (x forward, z right)
WALK_DIRECTIONS = {
    "forward": np.array([1.0, 0.0, 0.0]),
    "backward": np.array([-1.0, 0.0, 0.0]),
    "left": np.array([0.0, 0.0, -1.0]),
    "right": np.array([0.0, 0.0, 1.0]),
}
FOOT_SIDES = {"right": 0, "left": 1}
ARM_CHAINS = {"Right": -1.0, "Left": 1.0}

CONDITION_MAGIC = b"EGOC1"
CONDITION_HEADER = struct.Struct("<5sIII")
MANIFEST_NAME = "manifest.json"
DATASET_FORMAT_VERSION = 1
WORD_IDS = {word: i for i, word in enumerate(config.INSTRUCTION_VOCAB)}


class SynthDataError(ValueError):
    """Invalid script, scene or dataset request."""


@dataclass
class Primitive:
    kind: str
    frames: int
    direction: Optional[str] = None
    speed: Optional[str] = None
    angle_deg: Optional[float] = None
    depth: Optional[str] = None
    side: Optional[str] = None

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise SynthDataError(f"Unknown primitive '{self.kind}'")
        if self.frames <= 0:
            raise SynthDataError(f"Primitive duration must be positive, got {self.frames}")
        if self.kind == "walk" and (self.direction not in WALK_DIRECTIONS
                                    or self.speed not in config.PRIMITIVES["walk"]["speeds"]):
            raise SynthDataError(f"Walk needs a direction and speed, got {self.direction}/{self.speed}")
        if self.kind == "turn" and self.angle_deg is None:
            raise SynthDataError("Turn needs an angle")
        if self.kind == "bend" and self.depth not in config.PRIMITIVES["bend"]["depths_deg"]:
            raise SynthDataError(f"Unknown bend depth '{self.depth}'")
        if self.kind == "kick" and self.side not in FOOT_SIDES:
            raise SynthDataError(f"Unknown kick side '{self.side}'")

    def to_dict(self) -> Dict:
        return {key: value for key, value in asdict(self).items() if value is not None}


@dataclass
class Scene:
    """Goal bearing (radians, relative to the initial heading) and obstacle flags."""

    goal_bearing: float
    obstacle_ahead: bool = False
    ball_present: bool = False
    low_object: bool = False
    floor_height: float = 0.0

    def __post_init__(self):
        self.goal_bearing = float(wrap_angle(self.goal_bearing))

    def flags(self) -> np.ndarray:
        return np.array([self.obstacle_ahead, self.ball_present, self.low_object], dtype=np.float64)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class MotionScript:
    primitives: List[Primitive] = field(default_factory=list)

    def __post_init__(self):
        if not self.primitives:
            raise SynthDataError("Script needs at least one primitive")

    @property
    def total_frames(self) -> int:
        return sum(p.frames for p in self.primitives)

    @property
    def net_turn_deg(self) -> float:
        return float(sum(p.angle_deg for p in self.primitives if p.kind == "turn"))

    def to_dict(self) -> Dict:
        return {"primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, data: Dict) -> "MotionScript":
        return cls([Primitive(**p) for p in data["primitives"]])


def sample_scene(rng: np.random.Generator) -> Scene:
    return Scene(
        goal_bearing=float(rng.uniform(-math.pi, math.pi)),
        obstacle_ahead=bool(rng.random() < SCENE_FLAG_PROBABILITY),
        ball_present=bool(rng.random() < SCENE_FLAG_PROBABILITY),
        low_object=bool(rng.random() < SCENE_FLAG_PROBABILITY),
    )


def _random_primitive(rng: np.random.Generator, kind: Optional[str] = None) -> Primitive:
    kind = kind or str(rng.choice(PRIMITIVE_KINDS, p=RANDOM_KIND_WEIGHTS))
    if kind == "walk":
        speeds = list(config.PRIMITIVES["walk"]["speeds"])
        return Primitive("walk", 1, direction=str(rng.choice(list(WALK_DIRECTIONS))),
                         speed=str(rng.choice(speeds)))
    if kind == "turn":
        return Primitive("turn", 1, angle_deg=float(rng.choice(config.PRIMITIVES["turn"]["angles_deg"])))
    if kind == "bend":
        return Primitive("bend", 1, depth=str(rng.choice(list(config.PRIMITIVES["bend"]["depths_deg"]))))
    if kind == "kick":
        return Primitive("kick", 1, side=str(rng.choice(config.PRIMITIVES["kick"]["sides"])))
    return Primitive("idle", 1)


def _turn_toward(bearing: float) -> Optional[float]:
    """Nearest scripted turn angle for a goal bearing, or None when the goal is ahead."""
    angle = 45.0 * round(math.degrees(bearing) / 45.0)
    if angle == 0:
        return None
    if abs(angle) == 180:
        return 180.0
    return angle


def _split_durations(rng: np.random.Generator, count: int, total: int) -> List[int]:
    quantum = config.PRIMITIVE_FRAME_QUANTUM
    spare = total - count * config.MIN_PRIMITIVE_FRAMES
    if spare < 0 or spare % quantum:
        raise SynthDataError(f"Cannot split {total} frames into {count} primitives")
    extra = rng.multinomial(spare // quantum, np.full(count, 1.0 / count))
    return [config.MIN_PRIMITIVE_FRAMES + quantum * int(e) for e in extra]


def sample_script(rng: np.random.Generator, scene: Optional[Scene] = None,
                  total_frames: int = config.SEQUENCE_FRAMES) -> MotionScript:
    """2-4 primitives whose durations (>= 30 frames, multiples of 5) sum to total_frames.

    With a scene, the script first turns toward the goal and reacts to the
    obstacle flags; remaining slots are random primitives.
    """
    low, high = config.PRIMITIVES_PER_SCRIPT
    count = int(rng.integers(low, high + 1))
    plan: List[Primitive] = []
    if scene is not None:
        angle = _turn_toward(scene.goal_bearing)
        if angle is not None:
            plan.append(Primitive("turn", 1, angle_deg=angle))
        if scene.obstacle_ahead:
            plan.append(_random_primitive(rng, "walk"))
            plan[-1].direction = str(rng.choice(["left", "right"]))
        if scene.ball_present:
            plan.append(_random_primitive(rng, "kick"))
        if scene.low_object:
            plan.append(_random_primitive(rng, "bend"))
    plan = plan[:high]
    while len(plan) < count:
        plan.append(_random_primitive(rng))
    for prim, frames in zip(plan, _split_durations(rng, len(plan), total_frames)):
        prim.frames = frames
    return MotionScript(plan)


# --- realization ---------------------------------------------------------

@dataclass
class _Timeline:
    root: np.ndarray        # (N, 2) pelvis xz
    heading: np.ndarray     # (N,)
    velocity: np.ndarray    # (N, 2) m/frame
    moving: np.ndarray      # (N,) bool
    pitch: np.ndarray       # (N,) radians, forward lean
    kick_phase: np.ndarray  # (N,) in (0, 1], nan outside kicks
    kick_side: np.ndarray   # (N,) foot index


def _timeline(script: MotionScript, origin: np.ndarray, heading0: float, fps: float) -> _Timeline:
    n = script.total_frames
    velocity = np.zeros((n, 2))
    dtheta = np.zeros(n)
    pitch = np.zeros(n)
    kick_phase = np.full(n, np.nan)
    kick_side = np.zeros(n, dtype=np.int64)
    moving = np.zeros(n, dtype=bool)

    theta, t0 = heading0, 0
    for prim in script.primitives:
        d = prim.frames
        span = slice(t0, t0 + d)
        s = np.arange(1, d + 1) / d
        if prim.kind == "walk":
            speed = config.PRIMITIVES["walk"]["speeds"][prim.speed]
            world = _yaw_xz(theta) @ WALK_DIRECTIONS[prim.direction][[0, 2]]
            velocity[span] = world * speed / fps
            moving[span] = True
        elif prim.kind == "turn":
            # zero on the turn's first frame, so a script-initial turn is fully
            # realized between the first and last frames
            profile = np.sin(np.pi * np.arange(d) / d) ** 2 if d > 1 else np.ones(1)
            total = math.radians(prim.angle_deg)
            dtheta[span] = total * profile / profile.sum()
            theta += total
            moving[span] = True
        elif prim.kind == "bend":
            depth = math.radians(config.PRIMITIVES["bend"]["depths_deg"][prim.depth])
            pitch[span] = depth * np.sin(np.pi * s)
        elif prim.kind == "kick":
            kick_phase[span] = s
            kick_side[span] = FOOT_SIDES[prim.side]
        t0 += d

    return _Timeline(
        root=np.asarray(origin, dtype=np.float64) + np.cumsum(velocity, axis=0),
        heading=heading0 + np.cumsum(dtheta),
        velocity=velocity, moving=moving, pitch=pitch,
        kick_phase=kick_phase, kick_side=kick_side,
    )


def _yaw_xz(yaw: float) -> np.ndarray:
    """2x2 action of the yaw rotation on (x, z)."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, s], [-s, c]])


def _forward_xz(heading: np.ndarray) -> np.ndarray:
    return np.stack([np.cos(heading), -np.sin(heading)], axis=-1)


def _right_xz(heading: np.ndarray) -> np.ndarray:
    return np.stack([np.sin(heading), np.cos(heading)], axis=-1)


def _plan_feet(tl: _Timeline, origin: np.ndarray, heading0: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Alternating gait: each swing lasts swing_frames, planted feet stay exactly still.

    Returns ankle xz (N, 2, 2), ankle height (N, 2) and foot yaw (N, 2);
    foot 0 is the right foot.
    """
    n = len(tl.heading)
    swing_frames = config.GAIT["swing_frames"]
    lift = config.GAIT["lift_height"]
    lead = config.GAIT["step_lead_frames"]
    hip_width = config.BODY_DIMENSIONS["hip_width"]
    signs = np.array([1.0, -1.0])

    home = tl.root[:, None, :] + signs[None, :, None] * hip_width * _right_xz(tl.heading)[:, None, :]
    start_right = _right_xz(np.array(heading0))
    planted = [np.asarray(origin, dtype=np.float64) + sign * hip_width * start_right for sign in signs]
    planted_yaw = [heading0, heading0]

    xz = np.zeros((n, 2, 2))
    height = np.zeros((n, 2))
    yaw = np.zeros((n, 2))
    swing = None
    next_foot = 0
    for t in range(n):
        if swing is None and tl.moving[t]:
            t_end = min(t + swing_frames - 1, n - 1)
            target = home[t_end, next_foot] + tl.velocity[t_end] * lead
            swing = (next_foot, t, t_end, planted[next_foot].copy(), planted_yaw[next_foot],
                     target, tl.heading[t_end])
            next_foot = 1 - next_foot
        for foot in (0, 1):
            if swing is not None and swing[0] == foot:
                _, t_start, _, src, src_yaw, dst, dst_yaw = swing
                s = (t - t_start + 1) / swing_frames
                w = 0.5 - 0.5 * math.cos(math.pi * s)
                xz[t, foot] = src + (dst - src) * w
                height[t, foot] = lift * math.sin(math.pi * s)
                yaw[t, foot] = src_yaw + float(wrap_angle(dst_yaw - src_yaw)) * w
            else:
                xz[t, foot] = planted[foot]
                yaw[t, foot] = planted_yaw[foot]
        if swing is not None and t == swing[2]:
            foot = swing[0]
            planted[foot] = xz[t, foot].copy()
            planted_yaw[foot] = yaw[t, foot]
            if t - swing[1] + 1 == swing_frames:
                height[t, foot] = 0.0
            swing = None

    kicking = ~np.isnan(tl.kick_phase)
    if kicking.any():
        s = tl.kick_phase[kicking]
        rows = np.flatnonzero(kicking)
        side = tl.kick_side[kicking]
        bump = np.sin(np.pi * s)
        kick = config.PRIMITIVES["kick"]
        xz[rows, side] += _forward_xz(tl.heading[kicking]) * (kick["forward_reach"] * bump)[:, None]
        height[rows, side] += kick["lift"] * bump
    return xz, height, yaw


def _rotate_z(vectors: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rotate body-frame (N, 3) vectors about the body z axis; positive angles tip +y toward +x."""
    c, s = np.cos(angle), np.sin(angle)
    out = vectors.copy()
    out[:, 0] = vectors[:, 0] * c + vectors[:, 1] * s
    out[:, 1] = -vectors[:, 0] * s + vectors[:, 1] * c
    return out


def _body_to_world(pelvis: np.ndarray, heading: np.ndarray, body: np.ndarray) -> np.ndarray:
    """pelvis (N, 3) + R_y(heading) body (N, 3)."""
    c, s = np.cos(heading), np.sin(heading)
    world = np.empty_like(body)
    world[:, 0] = c * body[:, 0] + s * body[:, 2]
    world[:, 1] = body[:, 1]
    world[:, 2] = -s * body[:, 0] + c * body[:, 2]
    return pelvis + world


def _two_bone_ik(hip: np.ndarray, ankle: np.ndarray, bend: np.ndarray, upper: float,
                 lower: float) -> Tuple[np.ndarray, np.ndarray]:
    """Knee positions bending toward ``bend``; ankles out of reach are pulled toward the hip."""
    d = ankle - hip
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    reach = (upper + lower) * (1.0 - 1e-9)
    scale = np.minimum(1.0, reach / np.maximum(dist, 1e-12))
    if np.any(scale < 1.0):
        logger.debug(f"IK clamped {int(np.sum(scale < 1.0))} ankle targets")
    d = d * scale
    dist = dist * scale
    ankle = hip + d
    u = d / dist
    a = (upper ** 2 - lower ** 2 + dist ** 2) / (2.0 * dist)
    h = np.sqrt(np.clip(upper ** 2 - a ** 2, 0.0, None))
    perp = bend - np.sum(bend * u, axis=-1, keepdims=True) * u
    perp = perp / np.linalg.norm(perp, axis=-1, keepdims=True)
    return hip + a * u + h * perp, ankle


def _rig(tl: _Timeline, origin: np.ndarray, heading0: float) -> Dict[str, np.ndarray]:
    """World positions for every joint of the full 23-joint rig."""
    n = len(tl.heading)
    body = config.BODY_DIMENSIONS
    joints: Dict[str, np.ndarray] = {}
    pelvis = np.stack([tl.root[:, 0], np.full(n, body["pelvis_height"]), tl.root[:, 1]], axis=-1)
    joints["Pelvis"] = pelvis

    phase = np.cumsum(tl.moving) / config.GAIT["stride_frames"]
    swing = config.GAIT["arm_swing_rad"] * np.sin(2.0 * np.pi * phase)

    for name, offset in config.REST_OFFSETS.items():
        if name == "Pelvis" or name.endswith("UpperLeg"):
            continue
        vec = np.tile(np.asarray(offset, dtype=np.float64), (n, 1))
        for side, sign in ARM_CHAINS.items():
            if name in (f"{side}ForeArm", f"{side}Hand"):
                pivot = np.asarray(config.REST_OFFSETS[f"{side}UpperArm"], dtype=np.float64)
                vec = _rotate_z(vec - pivot, -sign * swing) + pivot
        vec = _rotate_z(vec, tl.pitch)
        joints[name] = _body_to_world(pelvis, tl.heading, vec)

    ankle_xz, ankle_y, foot_yaw = _plan_feet(tl, origin, heading0)
    forward = np.stack([np.cos(tl.heading), np.zeros(n), -np.sin(tl.heading)], axis=-1)
    for foot, side in enumerate(("Right", "Left")):
        hip_offset = np.tile(np.asarray(config.REST_OFFSETS[f"{side}UpperLeg"], dtype=np.float64), (n, 1))
        hip = _body_to_world(pelvis, tl.heading, hip_offset)
        ankle = np.stack([ankle_xz[:, foot, 0], ankle_y[:, foot], ankle_xz[:, foot, 1]], axis=-1)
        knee, ankle = _two_bone_ik(hip, ankle, forward, body["thigh_length"], body["shin_length"])
        toe = ankle + body["foot_length"] * np.stack(
            [np.cos(foot_yaw[:, foot]), np.zeros(n), -np.sin(foot_yaw[:, foot])], axis=-1)
        joints[f"{side}UpperLeg"] = hip
        joints[f"{side}LowerLeg"] = knee
        joints[f"{side}Foot"] = ankle
        joints[f"{side}Toe"] = toe
    return joints


def realize(script: MotionScript, skel: SkeletonConfig, origin=(0.0, 0.0), heading: float = 0.0) -> GlobalMotion:
    """Kinematic stick-figure realization of a script.

    ``origin`` is the pelvis floor position (x, z) before the first frame and
    ``heading`` the initial yaw. The full 23-joint rig is built and reduced to
    the skeleton's joints by name.
    """
    rig_joints = config.SKELETONS["xsens23"]["joints"]
    source = config.SKELETONS.get(skel.name, {}).get("source_joints", skel.joint_names)
    if not source or any(name not in rig_joints for name in source):
        raise SynthDataError(f"Skeleton '{skel.name}' has joints the procedural rig cannot place")
    origin = np.asarray(origin, dtype=np.float64)
    tl = _timeline(script, origin, float(heading), skel.fps)
    joints = _rig(tl, origin, float(heading))
    positions = np.stack([joints[name] for name in source], axis=1)
    return GlobalMotion(positions=positions, heading=tl.heading.copy(), fps=skel.fps)


# --- conditions ----------------------------------------------------------

def describe(script: MotionScript) -> List[str]:
    """Instruction words for a script, primitives joined by 'then'."""
    words: List[str] = []
    for i, prim in enumerate(script.primitives):
        if i:
            words.append("then")
        if prim.kind == "idle":
            words += ["stand", "still"]
        elif prim.kind == "walk":
            words += ["walk", prim.direction, prim.speed]
        elif prim.kind == "turn":
            angle = prim.angle_deg
            if abs(angle) >= 180:
                words += ["turn", "around"]
            else:
                words += ["turn", "left" if angle > 0 else "right"]
                if abs(angle) <= 45:
                    words.append("slightly")
                elif abs(angle) >= 135:
                    words.append("sharply")
        elif prim.kind == "bend":
            words += ["bend", "down"] + prim.depth.split()
        elif prim.kind == "kick":
            words += ["kick", "with", "the", prim.side, "foot"]
    return words


def tokenize_instruction(words: Sequence[str]) -> np.ndarray:
    ids = [WORD_IDS.get(word, UNKNOWN_WORD_ID) for word in words][:config.MAX_TEXT_LEN]
    return np.asarray(ids, dtype=np.int64)


def scene_feature(scene: Scene, seed: int = 0) -> np.ndarray:
    """[sin bearing, cos bearing, obstacle flags..., seeded noise] of width IMAGE_FEATURE_DIM."""
    feature = np.zeros(config.IMAGE_FEATURE_DIM, dtype=np.float64)
    feature[0] = math.sin(scene.goal_bearing)
    feature[1] = math.cos(scene.goal_bearing)
    flags = scene.flags()
    feature[2:2 + len(flags)] = flags
    rest = config.IMAGE_FEATURE_DIM - 2 - len(flags)
    feature[2 + len(flags):] = np.random.default_rng(seed).normal(0.0, config.IMAGE_NOISE_STD, rest)
    return feature.astype(np.float32)


def render_condition(script: MotionScript, scene: Scene, skel: Optional[SkeletonConfig] = None,
                     seed: int = 0, motion: Optional[GlobalMotion] = None) -> ConditionBundle:
    """Condition bundle for a script: scene feature, tokenized instruction, frame-0 features."""
    skel = skel or SkeletonConfig.from_name(config.DEFAULT_SKELETON)
    if motion is None:
        motion = realize(script, skel)
    init_pose = to_headcentric(motion, skel).features[0]
    return ConditionBundle(
        image_feature=scene_feature(scene, seed),
        instruction=tokenize_instruction(describe(script)),
        init_pose=init_pose,
    )


def save_condition(path: str, bundle: ConditionBundle) -> None:
    """EGOC1: header, float32 image feature, uint16 instruction ids, float32 frame-0 features."""
    header = CONDITION_HEADER.pack(CONDITION_MAGIC, len(bundle.image_feature), len(bundle.instruction),
                                   len(bundle.init_pose))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(bundle.image_feature, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(bundle.instruction, dtype="<u2").tobytes())
        f.write(np.ascontiguousarray(bundle.init_pose, dtype="<f4").tobytes())


def load_condition(path: str) -> ConditionBundle:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < CONDITION_HEADER.size:
        raise SynthDataError(f"{path}: truncated header")
    magic, f_dim, t_len, c_dim = CONDITION_HEADER.unpack_from(blob, 0)
    if magic != CONDITION_MAGIC:
        raise SynthDataError(f"{path}: bad magic {magic!r}")
    if len(blob) != CONDITION_HEADER.size + 4 * f_dim + 2 * t_len + 4 * c_dim:
        raise SynthDataError(f"{path}: size does not match header")
    offset = CONDITION_HEADER.size
    image = np.frombuffer(blob, dtype="<f4", count=f_dim, offset=offset)
    offset += 4 * f_dim
    instruction = np.frombuffer(blob, dtype="<u2", count=t_len, offset=offset)
    offset += 2 * t_len
    pose = np.frombuffer(blob, dtype="<f4", count=c_dim, offset=offset)
    return ConditionBundle(image.copy(), instruction.astype(np.int64), pose.copy())


# --- datasets ------------------------------------------------------------

@dataclass
class SyntheticSample:
    sample_id: str
    seed: int
    split: str
    scene: Scene
    script: MotionScript
    origin: np.ndarray
    heading: float
    motion: GlobalMotion
    condition: ConditionBundle

    def manifest_entry(self) -> Dict:
        return {
            "id": self.sample_id,
            "seed": self.seed,
            "split": self.split,
            "motion": f"motions/{self.sample_id}.egom",
            "condition": f"conditions/{self.sample_id}.egoc",
            "origin": [float(v) for v in self.origin],
            "heading": float(self.heading),
            "instruction": " ".join(describe(self.script)),
            "scene": self.scene.to_dict(),
            "script": self.script.to_dict(),
        }


def generate_sample(sample_id: str, seed: int, skel: SkeletonConfig, split: str = "train") -> SyntheticSample:
    """Everything about a sample follows from its seed."""
    rng = np.random.default_rng(seed)
    scene = sample_scene(rng)
    script = sample_script(rng, scene)
    origin = rng.uniform(-ORIGIN_RANGE_M, ORIGIN_RANGE_M, size=2)
    heading = float(rng.uniform(-math.pi, math.pi))
    noise_seed = int(rng.integers(2 ** 31))
    motion = realize(script, skel, origin, heading)
    condition = render_condition(script, scene, skel, noise_seed, motion)
    return SyntheticSample(sample_id, seed, split, scene, script, origin, heading, motion, condition)


def _generate_job(args) -> SyntheticSample:
    sample_id, seed, skel_name, split = args
    return generate_sample(sample_id, seed, SkeletonConfig.from_name(skel_name), split)


class SyntheticDataset:
    """Generated samples with a fixed train/test split."""

    def __init__(self, samples: List[SyntheticSample], skel: SkeletonConfig, seed: int):
        self.samples = samples
        self.skel = skel
        self.seed = seed

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> List[SyntheticSample]:
        if name not in ("train", "test", "all"):
            raise SynthDataError(f"Unknown split '{name}'")
        return [s for s in self.samples if name == "all" or s.split == name]

    @property
    def train(self) -> List[SyntheticSample]:
        return self.split("train")

    @property
    def test(self) -> List[SyntheticSample]:
        return self.split("test")

    def features(self, split: str = "train") -> np.ndarray:
        """(n, N, 3J+8) head-centric features."""
        return np.stack([to_headcentric(s.motion, self.skel).features for s in self.split(split)])

    def manifest(self) -> Dict:
        return {
            "format_version": DATASET_FORMAT_VERSION,
            "seed": self.seed,
            "skeleton": self.skel.name,
            "num_samples": len(self.samples),
            "frames": config.SEQUENCE_FRAMES,
            "fps": self.skel.fps,
            "samples": [s.manifest_entry() for s in self.samples],
        }

    def save(self, out_dir: str) -> str:
        os.makedirs(os.path.join(out_dir, "motions"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "conditions"), exist_ok=True)
        manifest = self.manifest()
        for sample, entry in zip(self.samples, manifest["samples"]):
            save_motion(os.path.join(out_dir, entry["motion"]), sample.motion)
            save_condition(os.path.join(out_dir, entry["condition"]), sample.condition)
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2)
        logger.info(f"Wrote {len(self.samples)} samples to {out_dir}")
        return path


def split_ids(n: int, seed: int, train_fraction: float = config.TRAIN_FRACTION) -> np.ndarray:
    """Boolean train flags for n samples."""
    order = np.random.default_rng(seed).permutation(n)
    flags = np.zeros(n, dtype=bool)
    flags[order[:int(round(train_fraction * n))]] = True
    return flags


def sample_seeds(n: int, seed: int) -> List[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(n)]


def check_samples(samples: Sequence[SyntheticSample], skel: SkeletonConfig,
                  validator: Optional[MotionValidator] = None) -> Dict:
    """Rigid bones, feet above the floor and net heading equal to the scripted turns."""
    validator = validator or MotionValidator()
    summary = validator.validate_batch([s.motion for s in samples], skel,
                                       expected_turns_deg=[s.script.net_turn_deg for s in samples])
    bad = sorted(set(summary['invalid']) | set(summary['inconsistent_turns']))
    if bad:
        ids = [samples[i].sample_id for i in bad]
        logger.error(f"{len(bad)} of {len(samples)} generated samples failed validation: {ids[:10]}")
        raise SynthDataError(f"Generated samples failed validation: {ids[:10]}")
    logger.info(f"Validated {len(samples)} samples, mean quality {summary['mean_quality_score']:.1f}")
    return summary


def build_dataset(n: int, seed: int = 0, skeleton: str = config.DEFAULT_SKELETON,
                  out_dir: Optional[str] = None, workers: int = config.NUM_WORKERS) -> SyntheticDataset:
    """Generate n samples with per-sample seeds and an 80/20 split; optionally persist them."""
    if n < 10:
        raise SynthDataError(f"Dataset needs at least 10 samples, got {n}")
    skel = SkeletonConfig.from_name(skeleton)
    train = split_ids(n, seed)
    jobs = [(f"{i:06d}", s, skeleton, "train" if train[i] else "test")
            for i, s in enumerate(sample_seeds(n, seed))]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_generate_job, jobs, chunksize=16))
    else:
        samples = [_generate_job(job) for job in jobs]
    check_samples(samples, skel)
    dataset = SyntheticDataset(samples, skel, seed)
    logger.info(f"Generated {n} samples ({int(train.sum())} train / {n - int(train.sum())} test)")
    if out_dir:
        dataset.save(out_dir)
    return dataset


def read_manifest(directory: str) -> Dict:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise SynthDataError(f"No dataset manifest at {path}")
    with open(path) as f:
        return json.load(f)


def load_dataset(directory: str) -> SyntheticDataset:
    """Read motions and conditions written by build_dataset."""
    manifest = read_manifest(directory)
    skel = SkeletonConfig.from_name(manifest["skeleton"])
    samples = []
    for entry in manifest["samples"]:
        motion = load_motion(os.path.join(directory, entry["motion"]), head_joint=skel.head_joint)
        condition = load_condition(os.path.join(directory, entry["condition"]))
        samples.append(SyntheticSample(
            entry["id"], int(entry["seed"]), entry["split"], Scene(**entry["scene"]),
            MotionScript.from_dict(entry["script"]), np.asarray(entry["origin"]), float(entry["heading"]),
            motion, condition))
    return SyntheticDataset(samples, skel, int(manifest["seed"]))


def regenerate(directory: str) -> SyntheticDataset:
    """Rebuild a dataset from the seeds in its manifest alone."""
    manifest = read_manifest(directory)
    skel = SkeletonConfig.from_name(manifest["skeleton"])
    samples = [generate_sample(e["id"], int(e["seed"]), skel, e["split"]) for e in manifest["samples"]]
    return SyntheticDataset(samples, skel, int(manifest["seed"]))


def verify_regeneration(directory: str) -> List[str]:
    """Ids whose regenerated float32 motion or condition differs from the stored files."""
    stored = load_dataset(directory)
    rebuilt = regenerate(directory)
    mismatched = []
    for a, b in zip(stored.samples, rebuilt.samples):
        same = (np.array_equal(a.motion.positions, b.motion.positions.astype(np.float32))
                and np.array_equal(a.motion.heading, b.motion.heading.astype(np.float32))
                and np.array_equal(a.condition.image_feature, b.condition.image_feature)
                and np.array_equal(a.condition.instruction, b.condition.instruction)
                and np.array_equal(a.condition.init_pose, b.condition.init_pose))
        if not same:
            mismatched.append(a.sample_id)
    if mismatched:
        logger.warning(f"{len(mismatched)} samples differ from their regenerated versions")
    return mismatched


# --- training tensors ----------------------------------------------------

class FeatureNormalizer:
    """Per-channel standardization of head-centric features; constant channels keep unit scale."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)

    @classmethod
    def fit(cls, features: np.ndarray, min_std: float = 1e-4) -> "FeatureNormalizer":
        flat = np.asarray(features, dtype=np.float64).reshape(-1, features.shape[-1])
        std = flat.std(axis=0)
        std = np.where(std < min_std, 1.0, std)
        return cls(flat.mean(axis=0), std)

    def _stats(self, x):
        if isinstance(x, torch.Tensor):
            return (torch.as_tensor(self.mean, device=x.device, dtype=x.dtype),
                    torch.as_tensor(self.std, device=x.device, dtype=x.dtype))
        return self.mean, self.std

    def normalize(self, x):
        mean, std = self._stats(x)
        return (x - mean) / std

    def denormalize(self, x):
        mean, std = self._stats(x)
        return x * std + mean

    def to_dict(self) -> Dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "FeatureNormalizer":
        return cls(np.asarray(data["mean"]), np.asarray(data["std"]))


@dataclass
class MotionTensors:
    """Normalized features and batched conditions for one split."""

    features: torch.Tensor          # (n, N, C)
    conditions: BundleBatch
    motions: List[GlobalMotion]
    init_head: np.ndarray           # (n, 3)
    init_heading: np.ndarray        # (n,)
    sample_ids: List[str]

    def __len__(self) -> int:
        return self.features.shape[0]

    def to(self, device) -> "MotionTensors":
        return MotionTensors(self.features.to(device), self.conditions.to(device), self.motions,
                             self.init_head, self.init_heading, self.sample_ids)


def to_tensors(dataset: SyntheticDataset, split: str, normalizer: FeatureNormalizer) -> MotionTensors:
    samples = dataset.split(split)
    if not samples:
        raise SynthDataError(f"Split '{split}' is empty")
    features = normalizer.normalize(dataset.features(split)).astype(np.float32)
    conditions = collate_bundles([s.condition for s in samples])
    conditions.init_pose = normalizer.normalize(conditions.init_pose)
    head = dataset.skel.head_joint
    return MotionTensors(
        features=torch.from_numpy(features),
        conditions=conditions,
        motions=[s.motion for s in samples],
        init_head=np.stack([s.motion.positions[0, head].astype(np.float64) for s in samples]),
        init_heading=np.array([float(s.motion.heading[0]) for s in samples]),
        sample_ids=[s.sample_id for s in samples],
    )


def decode_features(features, normalizer: FeatureNormalizer, init_head: np.ndarray,
                    init_heading: np.ndarray, skel: SkeletonConfig) -> List[GlobalMotion]:
    """Denormalize a (B, N, C) batch and integrate each sequence into world motion."""
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    raw = normalizer.denormalize(np.asarray(features, dtype=np.float32))
    return [from_headcentric(HeadCentricSequence(raw[i]), init_head[i], float(init_heading[i]), skel)
            for i in range(raw.shape[0])]
