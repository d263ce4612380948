"""Continuous VAE over occupancy frames: 2D encoder, 3D decoder.

Labels are embedded per voxel, depth is folded into channels, and a 2D conv
encoder produces a Gaussian posterior over a C x H1 x W1 latent. The decoder
upsamples back to full resolution, re-expands the depth axis with 3D
convolutions, and emits per-voxel class logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import GridSpec, OccupancyGrid

__all__ = [
    "VaeConfig",
    "LatentPosterior",
    "OccVae",
    "vae_sample",
    "gaussian_kl",
    "vae_loss",
]


@dataclass(frozen=True)
class VaeConfig:
    """Architecture knobs.

    ``down_ratios`` are cumulative per-stage downsample factors; the final
    entry is the total spatial reduction (8 at full scale, giving the 64x
    per-frame compression together with the latent width). ``attn_resolution``
    places one self-attention block at the stage whose spatial side matches
    (50 at full scale = H/4; toy configs scale this proportionally).
    """

    class_embed_dim: int = 8
    down_ratios: tuple[int, ...] = (1, 2, 4, 8)
    base_channels: int = 64
    res_blocks_per_stage: int = 2
    attn_resolution: int = 50
    latent_channels: int = 16
    kl_weight: float = 1e-6
    logvar_clamp: float = 10.0
    decoder_3d_channels: int = 32
    res_blocks_3d: int = 2

    def __post_init__(self):
        ratios = tuple(int(r) for r in self.down_ratios)
        if not ratios or ratios[0] != 1:
            raise ValueError("down_ratios must start at 1")
        for a, b in zip(ratios, ratios[1:]):
            if b != 2 * a:
                raise ValueError("down_ratios must double per stage")
        object.__setattr__(self, "down_ratios", ratios)

    @property
    def down_factor(self) -> int:
        return self.down_ratios[-1]

    @classmethod
    def toy(cls) -> "VaeConfig":
        return cls(base_channels=16, attn_resolution=16, latent_channels=16,
                   decoder_3d_channels=8, res_blocks_3d=1)


class LatentPosterior(NamedTuple):
    mean: torch.Tensor
    logvar: torch.Tensor


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock2d(nn.Module):
    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.norm1 = _gn(ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm2 = _gn(ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock2d(nn.Module):
    """Single-head self-attention over the spatial grid."""

    def __init__(self, channels):
        super().__init__()
        self.norm = _gn(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (attn @ v.transpose(1, 2)).transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj(out)


class ResBlock3d(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm1 = _gn(channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = _gn(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class OccVae(nn.Module):
    """Occupancy frame autoencoder with a Gaussian latent.

    encode() is deterministic (no sampling inside); stochasticity lives in
    :func:`vae_sample`.
    """

    def __init__(self, cfg: VaeConfig, spec: GridSpec):
        super().__init__()
        h, w, d = spec.dims
        f = cfg.down_factor
        if h % f != 0 or w % f != 0:
            raise ValueError(f"grid dims ({h}, {w}) not divisible by {f}")
        self.cfg = cfg
        self.spec = spec
        self.latent_hw = (h // f, w // f)

        stages = len(cfg.down_ratios)
        chans = [cfg.base_channels * min(2 ** i, 4) for i in range(stages)]
        self.class_embed = nn.Embedding(spec.num_classes, cfg.class_embed_dim)

        # encoder
        self.enc_in = nn.Conv2d(d * cfg.class_embed_dim, chans[0], 3, padding=1)
        enc = []
        for i in range(stages):
            side = h // cfg.down_ratios[i]
            ch_in = chans[max(i - 1, 0)] if i > 0 else chans[0]
            for b in range(cfg.res_blocks_per_stage):
                enc.append(ResBlock2d(ch_in if b == 0 else chans[i], chans[i]))
            if side == cfg.attn_resolution:
                enc.append(AttnBlock2d(chans[i]))
            if i < stages - 1:
                enc.append(nn.Conv2d(chans[i], chans[i], 3, stride=2, padding=1))
        self.encoder = nn.Sequential(*enc)
        self.enc_out_norm = _gn(chans[-1])
        self.enc_out = nn.Conv2d(chans[-1], 2 * cfg.latent_channels, 3, padding=1)

        # decoder
        self.dec_in = nn.Conv2d(cfg.latent_channels, chans[-1], 3, padding=1)
        dec = []
        for i in reversed(range(stages)):
            side = h // cfg.down_ratios[i]
            ch_in = chans[min(i + 1, stages - 1)] if i < stages - 1 else chans[-1]
            for b in range(cfg.res_blocks_per_stage):
                dec.append(ResBlock2d(ch_in if b == 0 else chans[i], chans[i]))
            if side == cfg.attn_resolution:
                dec.append(AttnBlock2d(chans[i]))
            if i > 0:
                dec.append(Upsample2d(chans[i]))
        self.decoder = nn.Sequential(*dec)
        d3 = cfg.decoder_3d_channels
        self.dec_2d_norm = _gn(chans[0])
        self.dec_to_3d = nn.Conv2d(chans[0], d * d3, 3, padding=1)
        self.dec_3d = nn.Sequential(*[ResBlock3d(d3) for _ in range(cfg.res_blocks_3d)])
        self.dec_out_norm = _gn(d3)
        self.dec_out = nn.Conv3d(d3, spec.num_classes, 3, padding=1)

    def encode(self, labels: torch.Tensor) -> LatentPosterior:
        """labels (B, H, W, D) int64 -> posterior over (B, C, H1, W1)."""
        b, h, w, d = labels.shape
        emb = self.class_embed(labels)                       # (B, H, W, D, E)
        x = emb.permute(0, 3, 4, 1, 2).reshape(b, d * self.cfg.class_embed_dim, h, w)
        x = self.encoder(self.enc_in(x))
        x = self.enc_out(F.silu(self.enc_out_norm(x)))
        mean, logvar = x.chunk(2, dim=1)
        clamp = self.cfg.logvar_clamp
        return LatentPosterior(mean, logvar.clamp(-clamp, clamp))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """z (B, C, H1, W1) -> logits (B, num_classes, H, W, D)."""
        b = z.shape[0]
        d = self.spec.dims[2]
        d3 = self.cfg.decoder_3d_channels
        x = self.decoder(self.dec_in(z))
        x = self.dec_to_3d(F.silu(self.dec_2d_norm(x)))      # (B, D*d3, H, W)
        x = x.reshape(b, d, d3, x.shape[-2], x.shape[-1]).permute(0, 2, 1, 3, 4)
        x = self.dec_3d(x)
        logits = self.dec_out(F.silu(self.dec_out_norm(x)))  # (B, K, D, H, W)
        return logits.permute(0, 1, 3, 4, 2)

    @torch.no_grad()
    def encode_grid(self, grid: OccupancyGrid) -> LatentPosterior:
        labels = torch.from_numpy(np.asarray(grid.labels, dtype=np.int64))[None]
        return self.encode(labels)

    @torch.no_grad()
    def reconstruct(self, grid: OccupancyGrid) -> OccupancyGrid:
        post = self.encode_grid(grid)
        logits = self.decode(post.mean)
        labels = logits.argmax(dim=1)[0].cpu().numpy().astype(np.uint8)
        return OccupancyGrid(grid.spec, labels)


class Upsample2d(nn.Module):
    """Nearest 2x interpolation followed by a 3x3 convolution."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def vae_sample(post: LatentPosterior, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw z = mean + exp(logvar / 2) * noise."""
    if noise.shape != post.mean.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != mean shape "
                         f"{tuple(post.mean.shape)}")
    return post.mean + torch.exp(0.5 * post.logvar) * noise


def gaussian_kl(post: LatentPosterior) -> torch.Tensor:
    """Mean per-element KL(N(mean, exp(logvar)) || N(0, 1))."""
    return 0.5 * (post.mean ** 2 + post.logvar.exp() - 1.0 - post.logvar).mean()


def vae_loss(logits: torch.Tensor, labels: torch.Tensor,
             post: LatentPosterior, beta: float):
    """Mean per-voxel cross-entropy plus beta-weighted KL.

    Returns (total, {"ce": ..., "kl": ...}) with detached components.
    """
    ce = F.cross_entropy(logits, labels)
    kl = gaussian_kl(post)
    total = ce + beta * kl
    return total, {"ce": ce.detach(), "kl": kl.detach()}
