"""Stage-II motion generators conditioned on frozen reasoner states.

Four paradigms share one cross-attention backbone:

- ``ar``: causal decoding over the delayed token layout
- ``masked``: bidirectional structured-mask token prediction with iterative decoding
- ``fm_raw``: flow matching directly on normalized head-centric features
- ``fm_latent``: flow matching on motion-VAE latents
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

import config
from delay_schedule import SpecialTokens, delay, valid_mask
from motion_transformer import TransformerBlock, key_padding_to_mask, sinusoidal_embedding
from reasoner import LevelEmbedding, Reasoner, decode_delayed, delayed_nll, sample_logits

logger = logging.getLogger(__name__)

PARADIGMS = ("ar", "masked", "fm_raw", "fm_latent")
TOKEN_PARADIGMS = ("ar", "masked")
FLOW_PARADIGMS = ("fm_raw", "fm_latent")


class GeneratorError(ValueError):
    """Invalid generator configuration or inputs."""


class FlowDivergenceError(RuntimeError):
    """Flow sampler produced a non-finite state."""


@dataclass
class GeneratorConfig:
    paradigm: str = "fm_latent"
    codebook_size: int = config.RVQ_DEFAULTS["codebook_size"]
    levels: int = config.RVQ_DEFAULTS["levels"]
    input_dim: int = config.VAE_DEFAULTS["latent_dim"]
    context_dim: int = config.REASONER_DEFAULTS["model_dim"]
    max_len: int = 160
    layers: int = config.GENERATOR_DEFAULTS["layers"]
    model_dim: int = config.GENERATOR_DEFAULTS["model_dim"]
    heads: int = config.GENERATOR_DEFAULTS["heads"]
    dropout: float = config.GENERATOR_DEFAULTS["dropout"]
    decode_iters: int = config.GENERATOR_DEFAULTS["decode_iters"]
    flow_steps: int = config.GENERATOR_DEFAULTS["flow_steps"]
    cfg_scale: float = config.GENERATOR_DEFAULTS["cfg_scale"]
    cond_dropout: float = config.GENERATOR_DEFAULTS["cond_dropout"]
    tie_embeddings: bool = config.GENERATOR_DEFAULTS["tie_embeddings"]
    sample_posterior: bool = config.GENERATOR_DEFAULTS["sample_posterior"]

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise GeneratorError(f"Unknown paradigm '{self.paradigm}', expected one of {PARADIGMS}")
        for name in ("layers", "model_dim", "heads", "decode_iters", "flow_steps", "max_len", "input_dim"):
            if getattr(self, name) < 1:
                raise GeneratorError(f"GeneratorConfig.{name} must be >= 1")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise GeneratorError(f"cond_dropout must be in [0, 1), got {self.cond_dropout}")

    def to_dict(self) -> Dict:
        return asdict(self)


class ConditionedBackbone(nn.Module):
    """Self-attention over motion slots with cross-attention to reasoner states."""

    def __init__(self, cfg: GeneratorConfig, causal: bool):
        super().__init__()
        D = cfg.model_dim
        self.causal = causal
        self.context_proj = nn.Linear(cfg.context_dim, D)
        self.null_context = nn.Parameter(torch.zeros(1, 1, D))
        self.pos = nn.Embedding(cfg.max_len, D)
        self.blocks = nn.ModuleList([
            TransformerBlock(D, cfg.heads, dropout=cfg.dropout, cross_attention=True) for _ in range(cfg.layers)
        ])
        self.norm = nn.LayerNorm(D)
        self.max_len = cfg.max_len

    def context(self, h: torch.Tensor, h_pad: Optional[torch.Tensor],
                drop: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Project the condition hidden states; rows flagged in ``drop`` are replaced by the learned null context."""
        ctx = self.context_proj(h)
        if drop is not None and bool(drop.any()):
            ctx = torch.where(drop[:, None, None], self.null_context.expand_as(ctx), ctx)
            if h_pad is not None:
                h_pad = h_pad & ~drop[:, None]
        return ctx, h_pad

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, ctx_pad: Optional[torch.Tensor]) -> torch.Tensor:
        S = x.shape[1]
        if S > self.max_len:
            raise GeneratorError(f"Sequence length {S} exceeds max_len {self.max_len}")
        x = x + self.pos(torch.arange(S, device=x.device))
        mask = None
        if self.causal:
            mask = torch.ones(S, S, dtype=torch.bool, device=x.device).tril()
        context_mask = key_padding_to_mask(ctx_pad)
        for block in self.blocks:
            x = block(x, mask=mask, context=ctx, context_mask=context_mask)
        return self.norm(x)


def _condition_drop(batch_size: int, rate: float, training: bool, device,
                    generator: Optional[torch.Generator] = None) -> Optional[torch.Tensor]:
    if not training or rate <= 0:
        return None
    return torch.rand(batch_size, generator=generator, device=device) < rate


def _guided(fn: Callable[[Optional[torch.Tensor]], torch.Tensor], batch_size: int, scale: float, device):
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    cond = fn(None)
    if scale == 1.0:
        return cond
    uncond = fn(torch.ones(batch_size, dtype=torch.bool, device=device))
    return uncond + scale * (cond - uncond)


# ----------------------------------------------------------------------------
# autoregressive

ar_loss = delayed_nll


class ArGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.special = SpecialTokens(cfg.codebook_size)
        self.token_embed = LevelEmbedding(cfg.levels, self.special.vocab_size, cfg.model_dim)
        self.backbone = ConditionedBackbone(cfg, causal=True)
        self.head = nn.Linear(cfg.model_dim, cfg.levels * self.special.vocab_size)

    def tie_embeddings(self, reasoner: Reasoner):
        """Copy the reasoner's per-level token embeddings."""
        if reasoner.cfg.model_dim != self.cfg.model_dim or reasoner.cfg.levels != self.cfg.levels:
            raise GeneratorError("Cannot tie embeddings: reasoner and generator widths or levels differ")
        self.token_embed.load_state_dict(reasoner.token_embed.state_dict())
        logger.info("Initialized AR generator embeddings from the reasoner")

    def forward(self, delayed: torch.Tensor, h: torch.Tensor, h_pad: Optional[torch.Tensor] = None,
                drop: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, L, S = delayed.shape
        bos = torch.full((B, L, 1), self.special.bos, dtype=delayed.dtype, device=delayed.device)
        x = self.token_embed(torch.cat([bos, delayed[..., :-1]], dim=-1))
        ctx, ctx_pad = self.backbone.context(h, h_pad, drop)
        out = self.head(self.backbone(x, ctx, ctx_pad))
        return out.view(B, S, L, self.special.vocab_size).permute(0, 2, 1, 3)

    def loss(self, tokens: torch.Tensor, h: torch.Tensor, h_pad: Optional[torch.Tensor] = None,
             generator: Optional[torch.Generator] = None) -> torch.Tensor:
        delayed = delay(tokens, self.special.pad)
        drop = _condition_drop(len(tokens), self.cfg.cond_dropout, self.training, tokens.device, generator)
        return ar_loss(self(delayed, h, h_pad, drop), delayed)

    @torch.no_grad()
    def generate(self, h: torch.Tensor, h_pad: Optional[torch.Tensor], num_steps: int,
                 temperature: float = 0.0, top_k: Optional[int] = None,
                 generator: Optional[torch.Generator] = None, cfg_scale: Optional[float] = None) -> torch.Tensor:
        scale = self.cfg.cfg_scale if cfg_scale is None else cfg_scale

        def step_fn(delayed):
            return _guided(lambda drop: self(delayed, h, h_pad, drop), len(h), scale, h.device)

        return decode_delayed(step_fn, len(h), self.cfg.levels, self.cfg.codebook_size, num_steps,
                              h.device, temperature, top_k, generator)


def ar_generate(model: ArGenerator, h: torch.Tensor, num_steps: int, h_pad: Optional[torch.Tensor] = None,
                **kwargs) -> torch.Tensor:
    return model.generate(h, h_pad, num_steps, **kwargs)


@torch.no_grad()
def teacher_forced_error_rate(model: ArGenerator, tokens: torch.Tensor, h: torch.Tensor,
                              h_pad: Optional[torch.Tensor] = None) -> float:
    """Greedy token error rate when every step sees ground-truth history."""
    delayed = delay(tokens, model.special.pad)
    logits = model(delayed, h, h_pad)[..., :model.cfg.codebook_size]
    valid = valid_mask(tokens.shape[1], tokens.shape[2], device=tokens.device).expand_as(delayed)
    wrong = logits.argmax(-1)[valid] != delayed[valid]
    return float(wrong.float().mean())


@torch.no_grad()
def free_running_error_rate(model: ArGenerator, tokens: torch.Tensor, h: torch.Tensor,
                            h_pad: Optional[torch.Tensor] = None) -> float:
    """Greedy token error rate when the model conditions on its own outputs."""
    generated = model.generate(h, h_pad, tokens.shape[-1], cfg_scale=1.0)
    return float((generated != tokens).float().mean())


# ----------------------------------------------------------------------------
# structured masking

def sample_mask_ratio(generator: Optional[torch.Generator] = None) -> float:
    """Cosine-distributed mask ratio in (0, 1]; zero draws are resampled."""
    while True:
        u = float(torch.rand((), generator=generator))
        ratio = math.cos(0.5 * math.pi * u)
        if ratio > 0.0:
            return ratio


def sample_structured_mask(num_steps: int, ratio: float, batch_size: Optional[int] = None,
                           generator: Optional[torch.Generator] = None, device=None) -> torch.Tensor:
    """Boolean timestep mask with exactly ceil(ratio * N1) masked timesteps per row."""
    if not 0.0 < ratio <= 1.0:
        raise GeneratorError(f"Mask ratio must be in (0, 1], got {ratio}")
    count = min(num_steps, max(1, math.ceil(ratio * num_steps)))
    rows = 1 if batch_size is None else batch_size
    scores = torch.rand(rows, num_steps, generator=generator, device=device)
    ranks = scores.argsort(dim=-1).argsort(dim=-1)
    mask = ranks < count
    return mask[0] if batch_size is None else mask


def apply_structured_mask(tokens: torch.Tensor, mask: torch.Tensor, mask_id: int) -> torch.Tensor:
    """Replace every level of each masked timestep with ``mask_id``."""
    return tokens.masked_fill(mask[..., None, :].expand_as(tokens), mask_id)


def masked_loss(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean NLL over all L * |M| masked cells of (B, L, N1, K) logits."""
    cells = mask[..., None, :].expand_as(tokens)
    if not bool(cells.any()):
        raise GeneratorError("Empty mask: no cells to supervise")
    return F.cross_entropy(logits[cells].float(), tokens[cells])


class MaskedGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.mask_id = cfg.codebook_size
        self.token_embed = LevelEmbedding(cfg.levels, cfg.codebook_size + 1, cfg.model_dim)
        self.backbone = ConditionedBackbone(cfg, causal=False)
        self.head = nn.Linear(cfg.model_dim, cfg.levels * cfg.codebook_size)

    def forward(self, masked_tokens: torch.Tensor, h: torch.Tensor, h_pad: Optional[torch.Tensor] = None,
                drop: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, L, N1 = masked_tokens.shape
        ctx, ctx_pad = self.backbone.context(h, h_pad, drop)
        out = self.head(self.backbone(self.token_embed(masked_tokens), ctx, ctx_pad))
        return out.view(B, N1, L, self.cfg.codebook_size).permute(0, 2, 1, 3)

    def loss(self, tokens: torch.Tensor, h: torch.Tensor, h_pad: Optional[torch.Tensor] = None,
             generator: Optional[torch.Generator] = None) -> torch.Tensor:
        B, _, N1 = tokens.shape
        ratio = sample_mask_ratio(generator)
        mask = sample_structured_mask(N1, ratio, batch_size=B, generator=generator, device=tokens.device)
        drop = _condition_drop(B, self.cfg.cond_dropout, self.training, tokens.device, generator)
        logits = self(apply_structured_mask(tokens, mask, self.mask_id), h, h_pad, drop)
        return masked_loss(logits, tokens, mask)

    @torch.no_grad()
    def generate(self, h: torch.Tensor, h_pad: Optional[torch.Tensor], num_steps: int,
                 iters: Optional[int] = None, temperature: float = 0.0,
                 generator: Optional[torch.Generator] = None, cfg_scale: Optional[float] = None,
                 return_history: bool = False):
        """Confidence-ranked iterative decoding with a cosine keep schedule.

        A timestep's confidence is the minimum over its L levels; committed
        timesteps are never remasked.
        """
        iters = iters or self.cfg.decode_iters
        scale = self.cfg.cfg_scale if cfg_scale is None else cfg_scale
        B, L = len(h), self.cfg.levels
        tokens = torch.full((B, L, num_steps), self.mask_id, dtype=torch.long, device=h.device)
        committed = torch.zeros(B, num_steps, dtype=torch.bool, device=h.device)
        history: List[int] = []
        for i in range(iters):
            logits = _guided(lambda drop: self(tokens, h, h_pad, drop), B, scale, h.device)
            picks = sample_logits(logits, temperature, generator=generator)
            probs = F.softmax(logits.float(), dim=-1).gather(-1, picks[..., None])[..., 0]
            confidence = probs.min(dim=1).values
            confidence = confidence.masked_fill(committed, float("inf"))

            keep = math.ceil(num_steps * (1.0 - math.cos(0.5 * math.pi * (i + 1) / iters)))
            keep = min(num_steps, max(keep, int(committed.sum(-1).max()) + 1))
            if i == iters - 1:
                keep = num_steps
            top = confidence.topk(keep, dim=-1).indices
            new_committed = torch.zeros_like(committed).scatter_(1, top, True)
            fresh = new_committed & ~committed
            tokens = torch.where(fresh[:, None, :], picks, tokens)
            committed = new_committed
            history.append(int(committed.sum(-1).min()))
        if return_history:
            return tokens, history
        return tokens


def masked_generate(model: MaskedGenerator, h: torch.Tensor, num_steps: int, iters: int,
                    h_pad: Optional[torch.Tensor] = None, **kwargs):
    return model.generate(h, h_pad, num_steps, iters=iters, **kwargs)


# ----------------------------------------------------------------------------
# flow matching

class FlowState(NamedTuple):
    z_tau: torch.Tensor
    tau: torch.Tensor


def _broadcast_tau(tau, like: torch.Tensor) -> torch.Tensor:
    tau = torch.as_tensor(tau, dtype=like.dtype, device=like.device)
    return tau.reshape(tau.shape + (1,) * (like.ndim - tau.ndim))


def fm_interpolate(z: torch.Tensor, eps: torch.Tensor, tau) -> FlowState:
    """Z_tau = tau * Z + (1 - tau) * eps."""
    if z.shape != eps.shape:
        raise GeneratorError(f"Data {tuple(z.shape)} and noise {tuple(eps.shape)} shapes differ")
    t = _broadcast_tau(tau, z)
    if bool(((t < 0) | (t > 1)).any()):
        raise GeneratorError("tau must lie in [0, 1]")
    return FlowState(t * z + (1.0 - t) * eps, torch.as_tensor(tau, dtype=z.dtype, device=z.device))


def fm_loss(z: torch.Tensor, h, predictor: Callable, eps: Optional[torch.Tensor] = None,
            tau: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None,
            reduction: str = "sum") -> torch.Tensor:
    """Regress predictor(Z_tau, tau, h) onto eps - Z with tau ~ U[0, 1].

    ``reduction="sum"`` sums the squared error over each sample and averages
    over the batch; ``"mean"`` averages over every element.
    """
    if eps is None:
        eps = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    if tau is None:
        tau = torch.rand(z.shape[0], generator=generator, dtype=z.dtype, device=z.device)
    state = fm_interpolate(z, eps, tau)
    error = (predictor(state.z_tau, state.tau, h) - (eps - z)).pow(2)
    if reduction == "mean":
        return error.mean()
    if reduction == "sum":
        return error.reshape(z.shape[0], -1).sum(-1).mean()
    raise GeneratorError(f"Unknown reduction '{reduction}'")


def fm_sample(h, shape, steps: int, predictor: Callable, noise: Optional[torch.Tensor] = None,
              generator: Optional[torch.Generator] = None, device=None,
              dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Euler integration Z <- Z - dtau * f(Z, tau, h) from noise at tau=0 to tau=1."""
    if steps < 1:
        raise GeneratorError(f"steps must be >= 1, got {steps}")
    z = noise if noise is not None else torch.randn(shape, generator=generator, device=device, dtype=dtype)
    dt = 1.0 / steps
    for i in range(steps):
        tau = torch.full((z.shape[0],), i * dt, dtype=z.dtype, device=z.device)
        z = z - dt * predictor(z, tau, h)
        if not bool(torch.isfinite(z).all()):
            raise FlowDivergenceError(f"Non-finite flow state at step {i + 1}/{steps} (tau={(i + 1) * dt:.3f})")
    return z


class FlowGenerator(nn.Module):
    """Velocity field f(z_tau, tau, h) over raw features or VAE latents."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        if cfg.paradigm not in FLOW_PARADIGMS:
            raise GeneratorError(f"FlowGenerator needs a flow paradigm, got '{cfg.paradigm}'")
        self.cfg = cfg
        D = cfg.model_dim
        self.in_proj = nn.Linear(cfg.input_dim, D)
        self.time_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.backbone = ConditionedBackbone(cfg, causal=False)
        self.out_proj = nn.Linear(D, cfg.input_dim)
        self.register_buffer("latent_scale", torch.ones(()))

    def set_latent_scale(self, latents: torch.Tensor):
        self.latent_scale.fill_(float(latents.std().clamp_min(1e-6)))
        logger.info(f"Flow target scale set to {float(self.latent_scale):.4f}")

    def forward(self, z_tau: torch.Tensor, tau: torch.Tensor, h: torch.Tensor,
                h_pad: Optional[torch.Tensor] = None, drop: Optional[torch.Tensor] = None) -> torch.Tensor:
        t = self.time_mlp(sinusoidal_embedding(tau, self.cfg.model_dim))
        x = self.in_proj(z_tau) + t[:, None, :]
        ctx, ctx_pad = self.backbone.context(h, h_pad, drop)
        return self.out_proj(self.backbone(x, ctx, ctx_pad))

    def loss(self, z: torch.Tensor, h: torch.Tensor, h_pad: Optional[torch.Tensor] = None,
             generator: Optional[torch.Generator] = None) -> torch.Tensor:
        drop = _condition_drop(len(z), self.cfg.cond_dropout, self.training, z.device, generator)
        predictor = lambda zt, tau, ctx: self(zt, tau, ctx, h_pad, drop)
        return fm_loss(z / self.latent_scale, h, predictor, generator=generator, reduction="mean")

    @torch.no_grad()
    def generate(self, h: torch.Tensor, h_pad: Optional[torch.Tensor], length: int,
                 steps: Optional[int] = None, generator: Optional[torch.Generator] = None,
                 cfg_scale: Optional[float] = None, noise: Optional[torch.Tensor] = None) -> torch.Tensor:
        steps = steps or self.cfg.flow_steps
        scale = self.cfg.cfg_scale if cfg_scale is None else cfg_scale

        def predictor(zt, tau, ctx):
            return _guided(lambda drop: self(zt, tau, ctx, h_pad, drop), len(zt), scale, zt.device)

        z = fm_sample(h, (len(h), length, self.cfg.input_dim), steps, predictor, noise=noise,
                      generator=generator, device=h.device)
        return z * self.latent_scale


Generator = Union[ArGenerator, MaskedGenerator, FlowGenerator]


def build_generator(cfg: GeneratorConfig) -> Generator:
    if cfg.paradigm == "ar":
        return ArGenerator(cfg)
    if cfg.paradigm == "masked":
        return MaskedGenerator(cfg)
    return FlowGenerator(cfg)
