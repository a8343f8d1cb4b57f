"""Residual vector-quantized autoencoder over head-centric motion features."""

import logging
import os
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

import config

logger = logging.getLogger(__name__)

TOKENS_MAGIC = b"EGOT1"
TOKENS_HEADER = struct.Struct("<5sIII")


class QuantizerError(ValueError):
    """Shape or token-range violation in the quantizer."""


@dataclass
class RvqConfig:
    levels: int = config.RVQ_DEFAULTS["levels"]
    codebook_size: int = config.RVQ_DEFAULTS["codebook_size"]
    latent_dim: int = config.RVQ_DEFAULTS["latent_dim"]
    temporal_downsample: int = config.RVQ_DEFAULTS["temporal_downsample"]
    beta: float = config.RVQ_DEFAULTS["beta"]
    hidden_dim: int = config.RVQ_DEFAULTS["hidden_dim"]
    num_res_blocks: int = config.RVQ_DEFAULTS["num_res_blocks"]
    ema_decay: float = config.RVQ_DEFAULTS["ema_decay"]
    dead_window: int = config.RVQ_DEFAULTS["dead_window"]
    quantize_dropout: bool = config.RVQ_DEFAULTS["quantize_dropout"]

    def __post_init__(self):
        if self.levels < 1 or self.codebook_size < 2 or self.latent_dim < 1:
            raise QuantizerError(f"Invalid RVQ sizes: {self}")
        if self.temporal_downsample < 1 or self.beta < 0:
            raise QuantizerError(f"Invalid RVQ downsample/beta: {self}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise QuantizerError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    def to_dict(self) -> Dict:
        return asdict(self)


class QuantizeResult(NamedTuple):
    tokens: torch.Tensor                  # (..., L, N1)
    quantized: torch.Tensor               # (..., N1, D)
    residuals: List[torch.Tensor]         # R^1 .. R^{L+1}
    quantized_residuals: List[torch.Tensor]
    residual_norms: torch.Tensor          # (L+1,)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, int]:
    """Repeat the last frame of (B, N, C) until N divides ``multiple``."""
    length = x.shape[1]
    extra = (-length) % multiple
    if extra:
        x = torch.cat([x, x[:, -1:].expand(-1, extra, -1)], dim=1)
    return x, length


class ResBlock1d(nn.Module):
    def __init__(self, channels: int, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class MotionEncoder(nn.Module):
    """Temporal conv encoder: (B, N, C) -> (B, N/ds, D)."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, downsample: int, num_res_blocks: int = 2):
        super().__init__()
        self.downsample = downsample
        layers = [nn.Conv1d(in_dim, hidden_dim, 3, padding=1)]
        layers += [ResBlock1d(hidden_dim, 3 ** i) for i in range(num_res_blocks)]
        layers += [nn.Conv1d(hidden_dim, hidden_dim, downsample, stride=downsample)]
        layers += [ResBlock1d(hidden_dim, 3 ** i) for i in range(num_res_blocks)]
        layers += [nn.ReLU(), nn.Conv1d(hidden_dim, out_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[1] % self.downsample:
            raise QuantizerError(f"Sequence length {x.shape[1]} not divisible by {self.downsample}")
        h = self.net(rearrange(x, "b n c -> b c n"))
        return rearrange(h, "b d n -> b n d")


class MotionDecoder(nn.Module):
    """Mirror of MotionEncoder: (B, N1, D) -> (B, N1*ds, C)."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, upsample: int, num_res_blocks: int = 2):
        super().__init__()
        layers = [nn.Conv1d(in_dim, hidden_dim, 3, padding=1)]
        layers += [ResBlock1d(hidden_dim, 3 ** i) for i in reversed(range(num_res_blocks))]
        layers += [nn.ConvTranspose1d(hidden_dim, hidden_dim, upsample, stride=upsample)]
        layers += [ResBlock1d(hidden_dim, 3 ** i) for i in reversed(range(num_res_blocks))]
        layers += [nn.ReLU(), nn.Conv1d(hidden_dim, out_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)
        self.in_dim = in_dim

    def forward(self, z):
        if z.shape[-1] != self.in_dim:
            raise QuantizerError(f"Decoder expects latent width {self.in_dim}, got {z.shape[-1]}")
        h = self.net(rearrange(z, "b n d -> b d n"))
        return rearrange(h, "b c n -> b n c")


def nearest_entries(residual: torch.Tensor, book: torch.Tensor) -> torch.Tensor:
    """Index of the closest codebook row; ties resolve to the lowest index."""
    flat = residual.reshape(-1, residual.shape[-1])
    dist = (flat.pow(2).sum(-1, keepdim=True)
            - 2.0 * flat @ book.t()
            + book.pow(2).sum(-1)[None, :])
    return torch.argmin(dist, dim=-1).reshape(residual.shape[:-1])


def degenerate_levels(books: torch.Tensor) -> List[int]:
    """Levels whose entries are all identical."""
    return [l for l in range(books.shape[0]) if bool((books[l] == books[l, :1]).all())]


def quantize(z: torch.Tensor, books: torch.Tensor, active_levels: Optional[int] = None) -> QuantizeResult:
    """Residual quantization of z (..., N1, D) against books (L, K, D)."""
    if books.ndim != 3 or z.shape[-1] != books.shape[-1]:
        raise QuantizerError(f"Latent width {z.shape[-1]} does not match codebooks {tuple(books.shape)}")
    levels = books.shape[0] if active_levels is None else active_levels
    for level in degenerate_levels(books[:levels]):
        logger.warning(f"Codebook level {level} is degenerate (all entries equal)")

    residual = z
    residuals, quantized_residuals, tokens = [z], [], []
    quantized = torch.zeros_like(z)
    for level in range(levels):
        idx = nearest_entries(residual, books[level])
        chosen = F.embedding(idx, books[level])
        tokens.append(idx)
        quantized_residuals.append(chosen)
        quantized = quantized + chosen
        residual = residual - chosen
        residuals.append(residual)

    norms = torch.stack([r.detach().norm() for r in residuals])
    return QuantizeResult(torch.stack(tokens, dim=-2), quantized, residuals, quantized_residuals, norms)


def dequantize(tokens: torch.Tensor, books: torch.Tensor) -> torch.Tensor:
    """Sum of selected entries over levels: (..., L, N1) -> (..., N1, D)."""
    levels, size = books.shape[0], books.shape[1]
    if tokens.shape[-2] > levels:
        raise QuantizerError(f"Token grid has {tokens.shape[-2]} levels, codebooks have {levels}")
    if bool(((tokens < 0) | (tokens >= size)).any()):
        raise QuantizerError(f"Token outside [0, {size})")
    out = None
    for level in range(tokens.shape[-2]):
        chosen = F.embedding(tokens[..., level, :], books[level])
        out = chosen if out is None else out + chosen
    return out


def rvq_loss(x: torch.Tensor, x_hat: torch.Tensor, residuals: List[torch.Tensor],
             quantized_residuals: List[torch.Tensor], beta: float) -> Dict[str, torch.Tensor]:
    """L1 reconstruction plus beta * sum_l mean((R^l - sg[Rhat^l])^2)."""
    if x.shape != x_hat.shape:
        raise QuantizerError(f"Reconstruction shape {tuple(x_hat.shape)} != input {tuple(x.shape)}")
    recon = F.l1_loss(x_hat, x)
    commit = x.new_zeros(())
    for r, r_hat in zip(residuals, quantized_residuals):
        commit = commit + F.mse_loss(r, r_hat.detach())
    return {"loss": recon + beta * commit, "recon": recon, "commit": commit}


def ema_update(entries: torch.Tensor, ema_count: torch.Tensor, ema_sum: torch.Tensor,
               vectors: torch.Tensor, assignments: torch.Tensor, decay: float,
               eps: float = 1e-5) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Count-weighted EMA of entry means. Returns entries, count, sum, batch usage."""
    size = entries.shape[0]
    vectors = vectors.reshape(-1, vectors.shape[-1])
    onehot = F.one_hot(assignments.reshape(-1), size).type_as(vectors)
    batch_count = onehot.sum(0)
    batch_sum = onehot.t() @ vectors
    new_count = decay * ema_count + (1.0 - decay) * batch_count
    new_sum = decay * ema_sum + (1.0 - decay) * batch_sum
    used = batch_count > 0
    updated = new_sum / new_count.clamp_min(eps)[:, None]
    new_entries = torch.where(used[:, None], updated, entries)
    new_count = torch.where(used, new_count, ema_count)
    new_sum = torch.where(used[:, None], new_sum, ema_sum)
    return new_entries, new_count, new_sum, batch_count


def _tile(x: torch.Tensor, count: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    rows, dim = x.shape
    if rows < count:
        repeats = (count + rows - 1) // rows
        std = 0.01 / np.sqrt(dim)
        x = x.repeat(repeats, 1)
        x = x + torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device) * std
    return x


class ResidualQuantizer(nn.Module):
    """L codebooks learned by EMA with dead-entry reseeding."""

    def __init__(self, cfg: RvqConfig):
        super().__init__()
        self.cfg = cfg
        L, K, D = cfg.levels, cfg.codebook_size, cfg.latent_dim
        self.register_buffer("codebooks", torch.zeros(L, K, D))
        self.register_buffer("ema_count", torch.ones(L, K))
        self.register_buffer("ema_sum", torch.zeros(L, K, D))
        self.register_buffer("unused_steps", torch.zeros(L, K, dtype=torch.long))
        self.register_buffer("reseeded", torch.zeros(L, K, dtype=torch.bool))
        self.register_buffer("initialized", torch.zeros(L, dtype=torch.bool))
        self.generator: Optional[torch.Generator] = None

    def _init_level(self, level: int, vectors: torch.Tensor):
        flat = vectors.detach().reshape(-1, vectors.shape[-1])
        tiled = _tile(flat, self.cfg.codebook_size, self.generator)
        order = torch.randperm(tiled.shape[0], generator=self.generator, device=tiled.device)
        init = tiled[order[:self.cfg.codebook_size]]
        self.codebooks[level] = init
        self.ema_sum[level] = init
        self.ema_count[level] = 1.0
        self.initialized[level] = True
        logger.info(f"Initialized codebook level {level} from {flat.shape[0]} encoder vectors")

    @torch.no_grad()
    def update_codebooks(self, level: int, vectors: torch.Tensor, assignments: torch.Tensor) -> int:
        """EMA step for one level; reseeds entries unused for dead_window steps. Returns reseed count."""
        flat = vectors.detach().reshape(-1, vectors.shape[-1])
        entries, count, total, usage = ema_update(self.codebooks[level], self.ema_count[level],
                                                  self.ema_sum[level], flat, assignments,
                                                  self.cfg.ema_decay)
        self.codebooks[level] = entries
        self.ema_count[level] = count
        self.ema_sum[level] = total
        self.unused_steps[level] = torch.where(usage > 0, torch.zeros_like(self.unused_steps[level]),
                                               self.unused_steps[level] + 1)
        dead = self.unused_steps[level] >= self.cfg.dead_window
        n_dead = int(dead.sum())
        if n_dead:
            picks = torch.randint(0, flat.shape[0], (n_dead,), generator=self.generator, device=flat.device)
            self.codebooks[level][dead] = flat[picks]
            self.ema_sum[level][dead] = flat[picks]
            self.ema_count[level][dead] = 1.0
            self.unused_steps[level][dead] = 0
            self.reseeded[level][dead] = True
            logger.debug(f"Reseeded {n_dead} dead entries at level {level}")
        return n_dead

    def forward(self, z: torch.Tensor) -> QuantizeResult:
        active = self.cfg.levels
        if self.training and self.cfg.quantize_dropout:
            active = int(torch.randint(1, self.cfg.levels + 1, (1,), generator=self.generator))
        if self.training and not bool(self.initialized[:active].all()):
            residual = z.detach()
            for level in range(active):
                if not bool(self.initialized[level]):
                    self._init_level(level, residual)
                idx = nearest_entries(residual, self.codebooks[level])
                residual = residual - F.embedding(idx, self.codebooks[level])
        result = quantize(z, self.codebooks, active_levels=active)
        if self.training:
            for level in range(active):
                self.update_codebooks(level, result.residuals[level], result.tokens[..., level, :])
        return result

    def usage(self) -> Dict[str, float]:
        """Fraction of entries ever reseeded and mean EMA count per level."""
        return {
            "reseeded_fraction": float(self.reseeded.float().mean()),
            "mean_count": float(self.ema_count.mean()),
        }


class RvqVae(nn.Module):
    """Encoder, residual quantizer and decoder."""

    def __init__(self, feature_dim: int, cfg: Optional[RvqConfig] = None):
        super().__init__()
        self.cfg = cfg or RvqConfig()
        self.feature_dim = feature_dim
        self.encoder = MotionEncoder(feature_dim, self.cfg.hidden_dim, self.cfg.latent_dim,
                                     self.cfg.temporal_downsample, self.cfg.num_res_blocks)
        self.quantizer = ResidualQuantizer(self.cfg)
        self.decoder = MotionDecoder(self.cfg.latent_dim, self.cfg.hidden_dim, feature_dim,
                                     self.cfg.temporal_downsample, self.cfg.num_res_blocks)

    def _check_features(self, x: torch.Tensor):
        if x.ndim != 3 or x.shape[-1] != self.feature_dim:
            raise QuantizerError(f"Expected (B, N, {self.feature_dim}) features, got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor, return_length: bool = False):
        """(B, N, C) -> (B, N1, D1). N is padded up to a multiple of the downsample;
        ``return_length`` also returns the original N for ``decode``."""
        self._check_features(x)
        x, length = pad_to_multiple(x, self.cfg.temporal_downsample)
        z = self.encoder(x)
        return (z, length) if return_length else z

    def decode(self, z_hat: torch.Tensor, length: Optional[int] = None) -> torch.Tensor:
        x_hat = self.decoder(z_hat)
        return x_hat if length is None else x_hat[:, :length]

    def forward(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        self._check_features(x)
        padded, length = pad_to_multiple(x, self.cfg.temporal_downsample)
        z = self.encoder(padded)
        result = self.quantizer(z)
        z_st = z + (result.quantized - z).detach()
        x_hat = self.decoder(z_st)
        losses = rvq_loss(padded, x_hat, result.residuals[:-1], result.quantized_residuals, self.cfg.beta)
        losses.update({"x_hat": x_hat[:, :length], "tokens": result.tokens,
                       "residual_norms": result.residual_norms})
        return losses

    @torch.no_grad()
    def tokenize(self, x: torch.Tensor) -> torch.Tensor:
        """(B, N, C) features -> (B, L, N1) tokens."""
        return quantize(self.encode(x), self.quantizer.codebooks).tokens

    @torch.no_grad()
    def detokenize(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.decode(dequantize(tokens, self.quantizer.codebooks))


def save_tokens(path: str, tokens: np.ndarray, codebook_size: int) -> None:
    """Write an (L, N1) token grid in the EGOT1 layout (uint16 row-major)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise QuantizerError(f"Token grid must be (L, N1), got {tokens.shape}")
    if codebook_size > 65535:
        raise QuantizerError("EGOT1 stores tokens as uint16; codebook_size must be <= 65535")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= codebook_size):
        raise QuantizerError(f"Token outside [0, {codebook_size})")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(TOKENS_HEADER.pack(TOKENS_MAGIC, tokens.shape[0], tokens.shape[1], codebook_size))
        f.write(np.ascontiguousarray(tokens, dtype="<u2").tobytes())


def load_tokens(path: str) -> Tuple[np.ndarray, int]:
    """Read an EGOT1 token grid. Returns (tokens (L, N1), codebook_size)."""
    with open(path, "rb") as f:
        blob = f.read()
    magic, levels, steps, size = TOKENS_HEADER.unpack_from(blob, 0)
    if magic != TOKENS_MAGIC:
        raise QuantizerError(f"{path}: bad magic {magic!r}")
    expected = TOKENS_HEADER.size + 2 * levels * steps
    if len(blob) != expected:
        raise QuantizerError(f"{path}: expected {expected} bytes, found {len(blob)}")
    tokens = np.frombuffer(blob, dtype="<u2", offset=TOKENS_HEADER.size).reshape(levels, steps)
    return tokens.astype(np.int64), size
