"""Delay-parallel layout of multi-level token grids."""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch


class DelayLayoutError(ValueError):
    """Delayed grid does not follow the staircase layout."""


@dataclass(frozen=True)
class SpecialTokens:
    """Structural ids placed after the K codebook entries."""

    codebook_size: int

    @property
    def pad(self) -> int:
        return self.codebook_size

    @property
    def bos(self) -> int:
        return self.codebook_size + 1

    @property
    def eos(self) -> int:
        return self.codebook_size + 2

    @property
    def vocab_size(self) -> int:
        return self.codebook_size + 3


def delayed_length(levels: int, num_steps: int) -> int:
    return num_steps + levels - 1


def _to_tensor(grid):
    if isinstance(grid, torch.Tensor):
        return grid, False
    return torch.as_tensor(np.asarray(grid, dtype=np.int64)), True


def delay(grid, pad_id: int):
    """Shift level l right by l steps: (..., L, N1) -> (..., L, N1+L-1)."""
    tokens, was_numpy = _to_tensor(grid)
    *lead, levels, steps = tokens.shape
    out = torch.full((*lead, levels, delayed_length(levels, steps)), pad_id,
                     dtype=tokens.dtype, device=tokens.device)
    for level in range(levels):
        out[..., level, level:level + steps] = tokens[..., level, :]
    return out.numpy() if was_numpy else out


def valid_mask(levels: int, num_steps: int, device=None) -> torch.Tensor:
    """mask[l, n] is True iff l <= n < l + N1 (0-based levels)."""
    positions = torch.arange(delayed_length(levels, num_steps), device=device)
    level_index = torch.arange(levels, device=device)[:, None]
    return (positions[None, :] >= level_index) & (positions[None, :] < level_index + num_steps)


def undelay(delayed, pad_id: int, codebook_size: Optional[int] = None, check: bool = True):
    """Inverse of delay; validates the staircase unless ``check`` is False."""
    tokens, was_numpy = _to_tensor(delayed)
    *lead, levels, length = tokens.shape
    steps = length - levels + 1
    if steps < 1:
        raise DelayLayoutError(f"Delayed length {length} too short for {levels} levels")
    if check:
        mask = valid_mask(levels, steps, device=tokens.device)
        is_pad = tokens == pad_id
        if bool((~is_pad & ~mask).any()):
            raise DelayLayoutError("Non-PAD token found in a structural padding position")
        if bool((is_pad & mask).any()):
            raise DelayLayoutError("PAD token found inside a level's token window")
        if codebook_size is not None:
            inside = tokens[mask.expand_as(tokens)]
            if bool(((inside < 0) | (inside >= codebook_size)).any()):
                raise DelayLayoutError(f"Token outside [0, {codebook_size}) in delayed grid")
    out = torch.stack([tokens[..., level, level:level + steps] for level in range(levels)], dim=-2)
    return out.numpy() if was_numpy else out


def conditioning_set(levels: int, num_steps: int, step: int) -> Dict[int, range]:
    """Timesteps of each level visible to a causal model predicting delayed ``step``."""
    visible = {}
    for level in range(levels):
        visible[level] = range(0, max(0, min(num_steps, step - level)))
    return visible


def target_timestep(level: int, step: int) -> int:
    """Timestep supervised by head ``level`` at delayed ``step``."""
    return step - level
