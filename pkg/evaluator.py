"""Contrastive motion/condition evaluator that supplies the embedding space for FID and retrieval."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

import config
from motion_transformer import TransformerBlock, combine_masks
from reasoner import BundleBatch

logger = logging.getLogger(__name__)


@dataclass
class EvaluatorConfig:
    feature_dim: int = 77
    image_dim: int = config.IMAGE_FEATURE_DIM
    text_vocab_size: int = len(config.INSTRUCTION_VOCAB)
    max_text_len: int = config.MAX_TEXT_LEN
    max_frames: int = 160
    model_dim: int = config.EVALUATOR_DEFAULTS["model_dim"]
    embed_dim: int = config.EVALUATOR_DEFAULTS["embed_dim"]
    heads: int = config.EVALUATOR_DEFAULTS["heads"]
    motion_layers: int = config.EVALUATOR_DEFAULTS["motion_layers"]
    fusion_layers: int = config.EVALUATOR_DEFAULTS["fusion_layers"]
    temperature: float = config.EVALUATOR_DEFAULTS["temperature"]

    def to_dict(self) -> Dict:
        return asdict(self)


class RetrievalEvaluator(nn.Module):
    """Motion branch (6 layers, mean pool) and fused image+text branch (4 layers)."""

    def __init__(self, cfg: Optional[EvaluatorConfig] = None):
        super().__init__()
        self.cfg = cfg or EvaluatorConfig()
        D = self.cfg.model_dim
        self.motion_in = nn.Linear(self.cfg.feature_dim, D)
        self.motion_pos = nn.Embedding(self.cfg.max_frames, D)
        self.motion_blocks = nn.ModuleList([TransformerBlock(D, self.cfg.heads) for _ in range(self.cfg.motion_layers)])
        self.motion_norm = nn.LayerNorm(D)
        self.motion_proj = nn.Linear(D, self.cfg.embed_dim)

        self.image_in = nn.Linear(self.cfg.image_dim, D)
        self.text_embed = nn.Embedding(self.cfg.text_vocab_size, D)
        self.cond_pos = nn.Embedding(self.cfg.max_text_len + 1, D)
        self.segment = nn.Embedding(2, D)
        self.fusion_blocks = nn.ModuleList([TransformerBlock(D, self.cfg.heads) for _ in range(self.cfg.fusion_layers)])
        self.cond_norm = nn.LayerNorm(D)
        self.cond_proj = nn.Linear(D, self.cfg.embed_dim)

        self.temp = nn.Parameter(self.cfg.temperature * torch.ones([]))

    def embed_motion(self, features: torch.Tensor) -> torch.Tensor:
        """(B, N, C) normalized features -> (B, E) unit vectors."""
        x = self.motion_in(features) + self.motion_pos(torch.arange(features.shape[1], device=features.device))
        for block in self.motion_blocks:
            x = block(x)
        pooled = self.motion_norm(x).mean(dim=1)
        return F.normalize(self.motion_proj(pooled), dim=-1)

    def embed_condition(self, batch: BundleBatch) -> torch.Tensor:
        """Image slot and instruction tokens fused, masked mean pool -> (B, E) unit vectors."""
        image = self.image_in(batch.image)[:, None] + self.segment.weight[0]
        text = self.text_embed(batch.instruction) + self.segment.weight[1]
        x = torch.cat([image, text], dim=1)
        x = x + self.cond_pos(torch.arange(x.shape[1], device=x.device))
        keep = torch.cat([torch.ones_like(batch.instruction_mask[:, :1]), batch.instruction_mask], dim=1)
        mask = combine_masks(None, ~keep)
        for block in self.fusion_blocks:
            x = block(x, mask=mask)
        x = self.cond_norm(x)
        weights = keep.float()[..., None]
        pooled = (x * weights).sum(1) / weights.sum(1)
        return F.normalize(self.cond_proj(pooled), dim=-1)

    def contrastive_loss(self, motion_emb: torch.Tensor, cond_emb: torch.Tensor) -> torch.Tensor:
        """Symmetric InfoNCE with a learnable temperature."""
        with torch.no_grad():
            self.temp.clamp_(0.001, 0.5)
        sim = motion_emb @ cond_emb.t() / self.temp
        targets = torch.arange(len(sim), device=sim.device)
        return 0.5 * (F.cross_entropy(sim, targets) + F.cross_entropy(sim.t(), targets))

    def forward(self, features: torch.Tensor, batch: BundleBatch) -> torch.Tensor:
        return self.contrastive_loss(self.embed_motion(features), self.embed_condition(batch))


def train_evaluator(evaluator: RetrievalEvaluator, features: torch.Tensor, conditions: BundleBatch,
                    steps: int, lr: float = config.TRAINING_DEFAULTS["evaluator_lr"],
                    batch_size: int = config.RETRIEVAL_BATCH, weight_decay: float = 0.01,
                    generator: Optional[torch.Generator] = None,
                    log_every: int = config.TRAINING_DEFAULTS["log_every"]) -> List[float]:
    """Contrastive training on paired (features, conditions). Returns the loss history."""
    n = features.shape[0]
    batch_size = min(batch_size, n)
    optimizer = torch.optim.AdamW(evaluator.parameters(), lr=lr, weight_decay=weight_decay)
    evaluator.train()
    history = []
    for step in tqdm(range(steps), desc="evaluator", disable=not config.SHOW_PROGRESS):
        idx = torch.randperm(n, generator=generator)[:batch_size]
        loss = evaluator(features[idx], conditions.select(idx))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(float(loss))
        if log_every and (step + 1) % log_every == 0:
            logger.info(f"evaluator step {step + 1}/{steps} loss {history[-1]:.4f} temp {float(evaluator.temp):.4f}")
    evaluator.eval()
    return history


@torch.no_grad()
def embed_all(evaluator: RetrievalEvaluator, features: Optional[torch.Tensor] = None,
              conditions: Optional[BundleBatch] = None, chunk: int = 256) -> Dict[str, np.ndarray]:
    """Embed motions and/or conditions in chunks; returns numpy arrays."""
    evaluator.eval()
    out = {}
    if features is not None:
        out["motion"] = torch.cat([evaluator.embed_motion(features[i:i + chunk])
                                   for i in range(0, len(features), chunk)]).cpu().numpy()
    if conditions is not None:
        idx = torch.arange(len(conditions))
        out["condition"] = torch.cat([evaluator.embed_condition(conditions.select(idx[i:i + chunk]))
                                      for i in range(0, len(conditions), chunk)]).cpu().numpy()
    return out
