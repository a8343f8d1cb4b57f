"""Continuous motion VAE providing the latent space for latent flow matching."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

import config
from rvq_tokenizer import MotionDecoder, MotionEncoder, pad_to_multiple

logger = logging.getLogger(__name__)

LOGVAR_CLAMP = 10.0


class VaeError(ValueError):
    """Shape or configuration error in the motion VAE."""


@dataclass
class VaeConfig:
    latent_dim: int = config.VAE_DEFAULTS["latent_dim"]
    temporal_downsample: int = config.VAE_DEFAULTS["temporal_downsample"]
    kl_weight: float = config.VAE_DEFAULTS["kl_weight"]
    hidden_dim: int = config.VAE_DEFAULTS["hidden_dim"]
    num_res_blocks: int = config.VAE_DEFAULTS["num_res_blocks"]

    def __post_init__(self):
        if self.latent_dim < 1 or self.temporal_downsample < 1:
            raise VaeError(f"Invalid VAE sizes: {self}")
        if self.kl_weight < 0:
            raise VaeError(f"kl_weight must be >= 0, got {self.kl_weight}")

    def to_dict(self) -> Dict:
        return asdict(self)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, noise: Optional[torch.Tensor] = None,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps."""
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * noise


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over positions."""
    per_position = -0.5 * torch.sum(1.0 + logvar - mu.pow(2) - logvar.exp(), dim=-1)
    return per_position.mean()


def vae_loss(x: torch.Tensor, x_hat: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor,
             kl_weight: float) -> Dict[str, torch.Tensor]:
    if x.shape != x_hat.shape:
        raise VaeError(f"Reconstruction shape {tuple(x_hat.shape)} != input {tuple(x.shape)}")
    recon = F.l1_loss(x_hat, x)
    kl = kl_divergence(mu, logvar)
    return {"loss": recon + kl_weight * kl, "recon": recon, "kl": kl}


class MotionVae(nn.Module):
    """Conv encoder to a Gaussian posterior; decoder shared in design with the RVQ codec."""

    def __init__(self, feature_dim: int, cfg: Optional[VaeConfig] = None):
        super().__init__()
        self.cfg = cfg or VaeConfig()
        self.feature_dim = feature_dim
        self.encoder = MotionEncoder(feature_dim, self.cfg.hidden_dim, 2 * self.cfg.latent_dim,
                                     self.cfg.temporal_downsample, self.cfg.num_res_blocks)
        self.decoder = MotionDecoder(self.cfg.latent_dim, self.cfg.hidden_dim, feature_dim,
                                     self.cfg.temporal_downsample, self.cfg.num_res_blocks)

    def encode_posterior(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B, N, C) -> mu, logvar each (B, N1, latent_dim)."""
        if x.ndim != 3 or x.shape[-1] != self.feature_dim:
            raise VaeError(f"Expected (B, N, {self.feature_dim}) features, got {tuple(x.shape)}")
        x, _ = pad_to_multiple(x, self.cfg.temporal_downsample)
        mu, logvar = self.encoder(x).chunk(2, dim=-1)
        return mu, logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor, noise: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None) -> Dict[str, torch.Tensor]:
        padded, length = pad_to_multiple(x, self.cfg.temporal_downsample)
        mu, logvar = self.encode_posterior(x)
        z = reparameterize(mu, logvar, noise, generator)
        x_hat = self.decoder(z)
        losses = vae_loss(padded, x_hat, mu, logvar, self.cfg.kl_weight)
        losses.update({"x_hat": x_hat[:, :length], "mu": mu, "logvar": logvar, "z": z})
        return losses

    @torch.no_grad()
    def latents(self, x: torch.Tensor, sample: bool = True,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Posterior sample (or mean) used as the flow-matching target."""
        mu, logvar = self.encode_posterior(x)
        return reparameterize(mu, logvar, generator=generator) if sample else mu
