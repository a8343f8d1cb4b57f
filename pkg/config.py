"""Configuration for the Egocentric Motion Workbench."""

import os

from dotenv import load_dotenv

load_dotenv()


def _env_bool(name: str, default: bool = False) -> bool:
    return os.getenv(name, str(default)).strip().lower() in ("1", "true", "yes", "on")


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if not value:
        return default
    try:
        return int(value)
    except ValueError:
        return default


def _env_list(name: str, default: list[str]) -> list[str]:
    value = os.getenv(name)
    if not value:
        return default
    return [item.strip() for item in value.split(",") if item.strip()]


# Skeleton definitions. Rest offsets are pelvis-relative in the body frame
# (x forward, y up, z right); knee and foot joints are placed procedurally.
SKELETONS = {
    "xsens23": {
        "joints": [
            "Pelvis", "L5", "L3", "T12", "T8", "Neck", "Head",
            "RightShoulder", "RightUpperArm", "RightForeArm", "RightHand",
            "LeftShoulder", "LeftUpperArm", "LeftForeArm", "LeftHand",
            "RightUpperLeg", "RightLowerLeg", "RightFoot", "RightToe",
            "LeftUpperLeg", "LeftLowerLeg", "LeftFoot", "LeftToe",
        ],
        "parents": [-1, 0, 1, 2, 3, 4, 5, 4, 7, 8, 9, 4, 11, 12, 13, 0, 15, 16, 17, 0, 19, 20, 21],
        "head_joint": 6,
        "foot_joints": [17, 18, 21, 22],
        "rigid_bones": "parents",
        "fps": 30.0,
    },
    "compact7": {
        "joints": ["Pelvis", "Chest", "Head", "RightHand", "LeftHand", "RightFoot", "LeftFoot"],
        "parents": [-1, 0, 1, 1, 1, 0, 0],
        "head_joint": 2,
        "foot_joints": [5, 6],
        # hands and feet articulate through joints this skeleton drops
        "rigid_bones": [[0, 1], [1, 2]],
        "source_joints": ["Pelvis", "T8", "Head", "RightHand", "LeftHand", "RightFoot", "LeftFoot"],
        "fps": 30.0,
    },
}

DEFAULT_SKELETON = os.getenv("EGO_WORKBENCH_SKELETON", "xsens23")

REST_OFFSETS = {
    "Pelvis": [0.0, 0.0, 0.0],
    "L5": [0.0, 0.10, 0.0],
    "L3": [0.0, 0.20, 0.0],
    "T12": [0.0, 0.30, 0.0],
    "T8": [0.0, 0.42, 0.0],
    "Neck": [0.0, 0.60, 0.0],
    "Head": [0.0, 0.72, 0.0],
    "RightShoulder": [0.0, 0.55, 0.08],
    "RightUpperArm": [0.0, 0.55, 0.18],
    "RightForeArm": [0.0, 0.27, 0.18],
    "RightHand": [0.0, 0.02, 0.18],
    "LeftShoulder": [0.0, 0.55, -0.08],
    "LeftUpperArm": [0.0, 0.55, -0.18],
    "LeftForeArm": [0.0, 0.27, -0.18],
    "LeftHand": [0.0, 0.02, -0.18],
    "RightUpperLeg": [0.0, -0.05, 0.10],
    "LeftUpperLeg": [0.0, -0.05, -0.10],
}

BODY_DIMENSIONS = {
    "pelvis_height": 0.86,
    "thigh_length": 0.48,
    "shin_length": 0.48,
    "foot_length": 0.12,
    "hip_width": 0.10,
}

GAIT = {
    "swing_frames": 10,
    "lift_height": 0.08,
    "step_lead_frames": 5.0,
    "arm_swing_rad": 0.30,
    "stride_frames": 20,
}

# Synthetic primitive vocabulary
PRIMITIVES = {
    "walk": {
        "directions": ["forward", "backward", "left", "right"],
        "speeds": {"slowly": 0.6, "steadily": 1.0, "quickly": 1.4},
    },
    "turn": {"angles_deg": [-135, -90, -45, 45, 90, 135, 180]},
    "bend": {"depths_deg": {"a little": 30, "deeply": 60}},
    "kick": {"sides": ["right", "left"], "forward_reach": 0.45, "lift": 0.35},
    "idle": {},
}

SEQUENCE_FRAMES = 150
SEQUENCE_FPS = 30.0
MIN_PRIMITIVE_FRAMES = 30
PRIMITIVE_FRAME_QUANTUM = 5
PRIMITIVES_PER_SCRIPT = (2, 4)

IMAGE_FEATURE_DIM = 16
IMAGE_NOISE_STD = 0.05
MAX_TEXT_LEN = 32
TRAIN_FRACTION = 0.8

INSTRUCTION_VOCAB = [
    "<pad>", "<unk>", "then", "and", "stand", "still", "walk", "forward",
    "backward", "left", "right", "slowly", "steadily", "quickly", "turn",
    "around", "slightly", "sharply", "bend", "down", "a", "little", "deeply",
    "kick", "with", "the", "foot", "ball", "toward", "goal", "step", "look",
    "ahead", "obstacle", "low", "object", "pause", "briefly", "move", "body",
]

# Model defaults (desk scale)
RVQ_DEFAULTS = {
    "levels": 6,
    "codebook_size": 512,
    "latent_dim": 64,
    "temporal_downsample": 2,
    "beta": 0.02,
    "hidden_dim": 128,
    "num_res_blocks": 2,
    "ema_decay": 0.99,
    "dead_window": 256,
    "quantize_dropout": False,
}

VAE_DEFAULTS = {
    "latent_dim": 16,
    "temporal_downsample": 2,
    "kl_weight": 1e-4,
    "hidden_dim": 128,
    "num_res_blocks": 2,
}

REASONER_DEFAULTS = {
    "layers": 4,
    "model_dim": 256,
    "heads": 4,
    "dropout": 0.0,
}

GENERATOR_DEFAULTS = {
    "layers": 4,
    "model_dim": 256,
    "heads": 4,
    "dropout": 0.0,
    "decode_iters": 10,
    "flow_steps": 50,
    "cfg_scale": 1.0,
    "cond_dropout": 0.1,
    "tie_embeddings": False,
    "sample_posterior": True,
}

EVALUATOR_DEFAULTS = {
    "model_dim": 128,
    "embed_dim": 128,
    "heads": 4,
    "motion_layers": 6,
    "fusion_layers": 4,
    "temperature": 0.07,
}

TRAINING_DEFAULTS = {
    "codec_lr": 2e-4,
    "stage_lr": 3e-4,
    "evaluator_lr": 3e-4,
    "weight_decay": 0.01,
    "batch_size": 32,
    "codec_steps": 2000,
    "stage1_steps": 1000,
    "stage2_steps": 3000,
    "evaluator_steps": 1500,
    "joint_weight": 1.0,
    "log_every": 100,
}

CONTACT_THRESHOLDS = {
    "height_m": 0.05,
    "vertical_speed_m_per_frame": 0.005,
}

RETRIEVAL_BATCH = 64
FID_EPS = 1e-6
PSD_TOLERANCE = 1e-8

# System settings
TIMEZONE = os.getenv("EGO_WORKBENCH_TIMEZONE", "UTC")
DEVICE = os.getenv("EGO_WORKBENCH_DEVICE", "cpu")
SHOW_PROGRESS = _env_bool("EGO_WORKBENCH_PROGRESS", True)
NUM_WORKERS = _env_int("EGO_WORKBENCH_NUM_WORKERS", 0)
PLOT_FORMATS = _env_list("EGO_WORKBENCH_PLOT_FORMATS", ["html", "png"])

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
EXPERIMENT_ROOT = os.getenv("EGO_WORKBENCH_EXPERIMENT_ROOT", os.path.join(BASE_DIR, "experiments"))
CHECKPOINT_FORMAT_VERSION = 1

LOG_LEVEL = os.getenv("EGO_WORKBENCH_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
