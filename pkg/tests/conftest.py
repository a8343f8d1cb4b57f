import json
import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from kinematics import GlobalMotion, SkeletonConfig, yaw_matrix  # noqa: E402


@pytest.fixture
def xsens():
    return SkeletonConfig.from_name("xsens23")


@pytest.fixture
def compact():
    return SkeletonConfig.from_name("compact7")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen():
    return torch.Generator().manual_seed(1234)


def wandering_motion(skel: SkeletonConfig, frames: int = 150, seed: int = 0) -> GlobalMotion:
    """Smoothly turning, translating body with a fixed random pose and a bobbing head."""
    rng = np.random.default_rng(seed)
    t = np.arange(frames)
    heading = 0.4 * np.sin(t / 17.0) + 0.01 * t + rng.uniform(-np.pi, np.pi)
    head = np.zeros((frames, 3))
    head[:, 0] = np.cumsum(0.03 * np.cos(heading))
    head[:, 2] = np.cumsum(-0.03 * np.sin(heading))
    head[:, 1] = 1.6 + 0.02 * np.sin(t / 5.0)
    offsets = rng.normal(scale=0.3, size=(skel.num_joints, 3))
    offsets[skel.head_joint] = 0.0
    rotated = np.einsum("nij,kj->nki", yaw_matrix(heading), offsets)
    positions = head[:, None, :] + rotated
    return GlobalMotion(positions=positions, heading=heading, fps=skel.fps)


@pytest.fixture
def motion_factory():
    return wandering_motion


@pytest.fixture
def tiny_overrides(tmp_path):
    """Overrides that shrink every stage to a few optimizer steps on 20 samples."""
    return [
        f"experiment_root={json.dumps(str(tmp_path / 'experiments'))}",
        "device=cpu",
        "dataset.num_samples=20",
        "dataset.skeleton=compact7",
        "dataset.workers=0",
        "rvq.levels=2", "rvq.codebook_size=16", "rvq.latent_dim=8", "rvq.hidden_dim=16", "rvq.num_res_blocks=1",
        "vae.latent_dim=4", "vae.hidden_dim=16", "vae.num_res_blocks=1",
        "reasoner.layers=1", "reasoner.model_dim=32",
        "generator.layers=1", "generator.model_dim=32", "generator.decode_iters=2", "generator.flow_steps=2",
        "evaluator.model_dim=32", "evaluator.embed_dim=16", "evaluator.motion_layers=1",
        "evaluator.fusion_layers=1",
        "optim.codec_steps=3", "optim.stage1_steps=3", "optim.stage2_steps=3", "optim.evaluator_steps=3",
        "optim.batch_size=8", "optim.log_every=0",
        "eval.latency_samples=1", "eval.retrieval_batch=4",
    ]
