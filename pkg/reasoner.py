"""Stage-I reasoner: causal transformer over a condition prefix and delayed motion tokens."""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import config
from delay_schedule import SpecialTokens, delay, delayed_length, undelay, valid_mask
from motion_transformer import TransformerBlock, combine_masks, prefix_causal_mask

logger = logging.getLogger(__name__)

SEGMENT_IMAGE, SEGMENT_TEXT, SEGMENT_POSE, SEGMENT_MOTION = range(4)
CONDITION_MODES = ("full", "visual_only", "language_only")
UNKNOWN_WORD_ID = 1


class ConditionError(ValueError):
    """Invalid condition bundle."""


@dataclass
class ConditionBundle:
    """Image feature vector, instruction token ids and initial pose features."""

    image_feature: np.ndarray
    instruction: np.ndarray
    init_pose: np.ndarray

    def __post_init__(self):
        self.image_feature = np.asarray(self.image_feature, dtype=np.float32)
        self.instruction = np.asarray(self.instruction, dtype=np.int64)
        self.init_pose = np.asarray(self.init_pose, dtype=np.float32)
        if self.instruction.ndim != 1 or len(self.instruction) == 0:
            raise ConditionError(f"Instruction must be a non-empty 1-D id sequence, got {self.instruction.shape}")
        if not (np.all(np.isfinite(self.image_feature)) and np.all(np.isfinite(self.init_pose))):
            raise ConditionError("Condition bundle contains non-finite values")


@dataclass
class BundleBatch:
    image: torch.Tensor             # (B, F)
    instruction: torch.Tensor       # (B, T) long, 0-padded
    instruction_mask: torch.Tensor  # (B, T) True for real tokens
    init_pose: torch.Tensor         # (B, C)

    def to(self, device) -> "BundleBatch":
        return BundleBatch(self.image.to(device), self.instruction.to(device),
                           self.instruction_mask.to(device), self.init_pose.to(device))

    def __len__(self) -> int:
        return self.image.shape[0]

    def select(self, index) -> "BundleBatch":
        return BundleBatch(self.image[index], self.instruction[index],
                           self.instruction_mask[index], self.init_pose[index])


def collate_bundles(bundles: Sequence[ConditionBundle]) -> BundleBatch:
    width = max(len(b.instruction) for b in bundles)
    instruction = torch.zeros(len(bundles), width, dtype=torch.long)
    mask = torch.zeros(len(bundles), width, dtype=torch.bool)
    for i, b in enumerate(bundles):
        instruction[i, :len(b.instruction)] = torch.from_numpy(b.instruction)
        mask[i, :len(b.instruction)] = True
    image = torch.from_numpy(np.stack([b.image_feature for b in bundles]))
    pose = torch.from_numpy(np.stack([b.init_pose for b in bundles]))
    return BundleBatch(image, instruction, mask, pose)


def ablate_condition(batch: BundleBatch, mode: str) -> BundleBatch:
    """Drop one modality: visual_only replaces the instruction, language_only zeroes the image."""
    if mode not in CONDITION_MODES:
        raise ConditionError(f"Unknown condition mode '{mode}', expected one of {CONDITION_MODES}")
    if mode == "visual_only":
        instruction = torch.full_like(batch.instruction[:, :1], UNKNOWN_WORD_ID)
        return BundleBatch(batch.image, instruction, torch.ones_like(instruction, dtype=torch.bool),
                           batch.init_pose)
    if mode == "language_only":
        return replace(batch, image=torch.zeros_like(batch.image))
    return batch


@dataclass
class ReasonerConfig:
    codebook_size: int = config.RVQ_DEFAULTS["codebook_size"]
    levels: int = config.RVQ_DEFAULTS["levels"]
    feature_dim: int = 77
    image_dim: int = config.IMAGE_FEATURE_DIM
    text_vocab_size: int = len(config.INSTRUCTION_VOCAB)
    max_text_len: int = config.MAX_TEXT_LEN
    max_motion_steps: int = 128
    layers: int = config.REASONER_DEFAULTS["layers"]
    model_dim: int = config.REASONER_DEFAULTS["model_dim"]
    heads: int = config.REASONER_DEFAULTS["heads"]
    dropout: float = config.REASONER_DEFAULTS["dropout"]

    def __post_init__(self):
        for name in ("codebook_size", "levels", "feature_dim", "image_dim", "text_vocab_size",
                     "max_text_len", "max_motion_steps", "layers", "model_dim", "heads"):
            if getattr(self, name) <= 0:
                raise ConditionError(f"ReasonerConfig.{name} must be positive")

    @property
    def special(self) -> SpecialTokens:
        return SpecialTokens(self.codebook_size)

    @property
    def vocab_size(self) -> int:
        return self.special.vocab_size

    def to_dict(self) -> Dict:
        return asdict(self)


def delayed_nll(logits: torch.Tensor, targets: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean cross-entropy of (B, L, S, V) logits over valid delayed positions only."""
    levels, length = targets.shape[-2], targets.shape[-1]
    if valid is None:
        valid = valid_mask(levels, length - levels + 1, device=targets.device)
    valid = valid.expand_as(targets)
    return F.cross_entropy(logits[valid].float(), targets[valid])


stage1_loss = delayed_nll


def sample_logits(logits: torch.Tensor, temperature: float = 0.0, top_k: Optional[int] = None,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Greedy when temperature is 0, otherwise temperature / top-k sampling over the last axis."""
    if temperature <= 0:
        return logits.argmax(dim=-1)
    logits = logits / temperature
    if top_k is not None and top_k < logits.shape[-1]:
        kth = torch.topk(logits, top_k, dim=-1).values[..., -1:]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    probs = F.softmax(logits, dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    picks = torch.multinomial(flat, 1, generator=generator)
    return picks.reshape(probs.shape[:-1])


class LevelEmbedding(nn.Module):
    """One embedding table per level, summed into a single slot per step."""

    def __init__(self, levels: int, vocab: int, dim: int):
        super().__init__()
        self.tables = nn.ModuleList([nn.Embedding(vocab, dim) for _ in range(levels)])

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, L, S) -> (B, S, D)."""
        return sum(table(tokens[:, level]) for level, table in enumerate(self.tables))


class Reasoner(nn.Module):
    def __init__(self, cfg: Optional[ReasonerConfig] = None):
        super().__init__()
        self.cfg = cfg or ReasonerConfig()
        D, L, V = self.cfg.model_dim, self.cfg.levels, self.cfg.vocab_size
        self.image_proj = nn.Linear(self.cfg.image_dim, D)
        self.text_embed = nn.Embedding(self.cfg.text_vocab_size, D)
        self.pose_proj = nn.Linear(self.cfg.feature_dim, D)
        self.segment_embed = nn.Embedding(4, D)
        self.prefix_pos = nn.Embedding(self.cfg.max_text_len + 2, D)
        self.motion_pos = nn.Embedding(self.cfg.max_motion_steps, D)
        self.token_embed = LevelEmbedding(L, V, D)
        self.blocks = nn.ModuleList([
            TransformerBlock(D, self.cfg.heads, dropout=self.cfg.dropout) for _ in range(self.cfg.layers)
        ])
        self.norm = nn.LayerNorm(D)
        self.head = nn.Linear(D, L * V)

    def embed_condition(self, batch: BundleBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        """Prefix [image, instruction..., pose] embeddings (B, T+2, D) and key padding (B, T+2)."""
        T = batch.instruction.shape[1]
        if T > self.cfg.max_text_len:
            raise ConditionError(f"Instruction length {T} exceeds max_text_len {self.cfg.max_text_len}")
        if batch.image.shape[-1] != self.cfg.image_dim or batch.init_pose.shape[-1] != self.cfg.feature_dim:
            raise ConditionError("Image feature or initial pose width does not match the reasoner config")
        device = batch.image.device
        seg = self.segment_embed.weight
        image = self.image_proj(batch.image)[:, None] + seg[SEGMENT_IMAGE]
        text = self.text_embed(batch.instruction) + seg[SEGMENT_TEXT]
        pose = self.pose_proj(batch.init_pose)[:, None] + seg[SEGMENT_POSE]
        prefix = torch.cat([image, text, pose], dim=1)
        # the pose slot follows the last real word, whatever the batch padding
        positions = torch.arange(T + 2, device=device).repeat(len(batch), 1)
        positions[:, -1] = batch.instruction_mask.sum(dim=1) + 1
        prefix = prefix + self.prefix_pos(positions)
        edge = torch.zeros(len(batch), 1, dtype=torch.bool, device=device)
        padding = torch.cat([edge, ~batch.instruction_mask, edge], dim=1)
        return prefix, padding

    def _motion_inputs(self, delayed: torch.Tensor) -> torch.Tensor:
        B, L, S = delayed.shape
        if S > self.cfg.max_motion_steps:
            raise ConditionError(f"Delayed length {S} exceeds max_motion_steps {self.cfg.max_motion_steps}")
        bos = torch.full((B, L, 1), self.cfg.special.bos, dtype=delayed.dtype, device=delayed.device)
        shifted = torch.cat([bos, delayed[..., :-1]], dim=-1)
        x = self.token_embed(shifted) + self.segment_embed.weight[SEGMENT_MOTION]
        return x + self.motion_pos(torch.arange(S, device=delayed.device))

    def forward(self, batch: BundleBatch, delayed: torch.Tensor) -> torch.Tensor:
        """Logits (B, L, S, V) for delayed grid (B, L, S); step n sees steps < n only."""
        prefix, padding = self.embed_condition(batch)
        motion = self._motion_inputs(delayed)
        P, S = prefix.shape[1], motion.shape[1]
        x = torch.cat([prefix, motion], dim=1)
        key_padding = torch.cat([padding, torch.zeros(len(batch), S, dtype=torch.bool, device=x.device)], dim=1)
        mask = combine_masks(prefix_causal_mask(P, P + S, device=x.device), key_padding)
        for block in self.blocks:
            x = block(x, mask=mask)
        h = self.norm(x[:, P:])
        logits = self.head(h).view(len(batch), S, self.cfg.levels, self.cfg.vocab_size)
        return logits.permute(0, 2, 1, 3)

    def extract_hidden(self, batch: Union[BundleBatch, ConditionBundle]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Final-layer states over the condition prefix only, and its key padding."""
        single = isinstance(batch, ConditionBundle)
        if single:
            batch = collate_bundles([batch]).to(self.image_proj.weight.device)
        x, padding = self.embed_condition(batch)
        mask = combine_masks(None, padding)
        for block in self.blocks:
            x = block(x, mask=mask)
        hidden = self.norm(x)
        if single:
            return hidden[0], padding[0]
        return hidden, padding

    def loss(self, batch: BundleBatch, tokens: torch.Tensor) -> torch.Tensor:
        """Stage-I objective on a (B, L, N1) token grid."""
        delayed = delay(tokens, self.cfg.special.pad)
        return delayed_nll(self(batch, delayed), delayed)

    @torch.no_grad()
    def generate_tokens(self, batch: BundleBatch, num_steps: int, temperature: float = 0.0,
                        top_k: Optional[int] = None, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Decode all levels concurrently over the delayed layout, then undelay to (B, L, N1)."""
        return decode_delayed(lambda d: self(batch, d), len(batch), self.cfg.levels, self.cfg.codebook_size,
                              num_steps, batch.image.device, temperature, top_k, generator)


def decode_delayed(step_fn, batch_size: int, levels: int, codebook_size: int, num_steps: int, device,
                   temperature: float = 0.0, top_k: Optional[int] = None,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Autoregressive delayed decoding; structural positions are forced to PAD."""
    special = SpecialTokens(codebook_size)
    length = delayed_length(levels, num_steps)
    delayed = torch.full((batch_size, levels, length), special.pad, dtype=torch.long, device=device)
    valid = valid_mask(levels, num_steps, device=device)
    for step in range(length):
        logits = step_fn(delayed)[:, :, step, :codebook_size]
        picks = sample_logits(logits, temperature, top_k, generator)
        delayed[:, :, step] = torch.where(valid[:, step][None, :], picks, special.pad)
    return undelay(delayed, special.pad, codebook_size)


def freeze(module: nn.Module) -> nn.Module:
    """Detach a module from training: no gradients, eval mode."""
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()
