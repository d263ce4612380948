"""Pose- and layout-conditioned spatio-temporal diffusion transformer.

Latent frames become per-frame token grids (patch size 1). Blocks alternate
spatial attention (within a frame) and temporal attention (across frames at a
fixed spatial index), every block modulated by adaptive layer norm driven by
the timestep and pooled trajectory embeddings. Skip connections pair block k
with block N+1-k: the second-half block fuses its input with the cached skip
(plus optional control features added to the skip) through a per-block MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import Pose

__all__ = [
    "DiTConfig",
    "ConditionBundle",
    "ControlFeatureStack",
    "WorldModel",
    "relative_trajectory_features",
    "timestep_embedding",
]


@dataclass(frozen=True)
class DiTConfig:
    """Transformer shape. ``depth`` must be even for skip pairing."""

    depth: int = 28
    hidden: int = 768
    heads: int = 12
    mlp_ratio: int = 4
    patch_size: int = 1

    def __post_init__(self):
        if self.depth % 2 != 0:
            raise ValueError(f"depth must be even for skip pairing, got {self.depth}")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.patch_size != 1:
            raise ValueError("only patch_size 1 is supported")

    @classmethod
    def base(cls) -> "DiTConfig":
        return cls(depth=28, hidden=768, heads=12)

    @classmethod
    def small(cls) -> "DiTConfig":
        return cls(depth=12, hidden=384, heads=6)

    @classmethod
    def toy(cls) -> "DiTConfig":
        return cls(depth=6, hidden=96, heads=4)


@dataclass
class ConditionBundle:
    """Embedded conditioning for one forward pass.

    ``cond_flags`` marks clean (noise-free) history frames per batch element;
    ``pose_dropped`` marks elements whose trajectory condition is replaced by
    the learned null embedding (classifier-free slot).
    """

    timestep_embedding: torch.Tensor          # (B, hidden)
    trajectory_embedding: torch.Tensor        # (B, F, hidden)
    cond_flags: torch.Tensor                  # (B, F) bool
    pose_dropped: torch.Tensor                # (B,) bool
    layout_embedding: torch.Tensor | None = None  # (B, F, L, H1, W1)


@dataclass
class ControlFeatureStack:
    """Per-block control features for the second-half blocks.

    Keys are 1-indexed block numbers n in {N/2+1, ..., N}; values are token
    feature maps (B, tau, S, hidden) covering the future frames only.
    """

    features: dict[int, torch.Tensor] = field(default_factory=dict)

    def validate(self, depth: int, tau: int) -> None:
        expect = set(range(depth // 2 + 1, depth + 1))
        if set(self.features) != expect:
            raise ValueError(f"control stack must cover blocks {sorted(expect)}, "
                             f"got {sorted(self.features)}")
        for n, feat in self.features.items():
            if feat.shape[1] != tau:
                raise ValueError(f"control features for block {n} cover "
                                 f"{feat.shape[1]} frames, expected {tau}")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0):
    """Sinusoidal features of diffusion step indices, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period)
                      * torch.arange(half, dtype=torch.float64) / half).to(t.device)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


def relative_trajectory_features(history_poses: list[Pose],
                                 future_poses: list[Pose]) -> torch.Tensor:
    """Per-future-frame motion relative to the last history pose:
    (dx, dy, sin dyaw, cos dyaw) expressed in that frame, shape (tau, 4)."""
    anchor = history_poses[-1]
    rows = []
    for pose in future_poses:
        delta = anchor.rotation.T @ (pose.translation - anchor.translation)
        dyaw = pose.yaw - anchor.yaw
        rows.append([delta[0], delta[1], math.sin(dyaw), math.cos(dyaw)])
    return torch.tensor(rows, dtype=torch.float32)


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


def tokenize_latents(mod, latents: torch.Tensor, bundle: ConditionBundle):
    """Shared token pipeline for the world model and its trainable half-copy:
    channel-concat optional layout features, project, add positional and
    per-frame trajectory embeddings. ``mod`` supplies in_proj / pos_spatial /
    pos_temporal / layout_dim / diagnostic_temporal_identity."""
    b, f, c, h1, w1 = latents.shape
    x = latents.reshape(b, f, c, h1 * w1).transpose(2, 3)
    if mod.layout_dim:
        if bundle.layout_embedding is not None:
            lay = bundle.layout_embedding.reshape(b, f, mod.layout_dim, h1 * w1)
            lay = lay.transpose(2, 3)
        else:
            lay = torch.zeros(b, f, h1 * w1, mod.layout_dim,
                              dtype=x.dtype, device=x.device)
        x = torch.cat([x, lay], dim=-1)
    x = mod.in_proj(x) + mod.pos_spatial
    if not mod.diagnostic_temporal_identity:
        x = x + mod.pos_temporal
    x = x + bundle.trajectory_embedding[:, :, None, :]
    return x


class Attention(nn.Module):
    def __init__(self, hidden, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, hidden * 3)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x):
        # x: (N, L, hidden) -> attention over L
        n, l, h = x.shape
        qkv = self.qkv(x).reshape(n, l, 3, self.heads, h // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(n, l, h))


class STBlock(nn.Module):
    """One spatial or temporal transformer block with adaLN-zero conditioning."""

    def __init__(self, hidden, heads, mlp_ratio, axis):
        super().__init__()
        if axis not in ("spatial", "temporal"):
            raise ValueError(f"unknown block axis {axis!r}")
        self.axis = axis
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.attn = Attention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, hidden * mlp_ratio),
            nn.GELU(approximate="tanh"),
            nn.Linear(hidden * mlp_ratio, hidden),
        )
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)

    def forward(self, x, cond, temporal_identity=False):
        # x: (B, F, S, hidden); cond: (B, hidden)
        b, f, s, h = x.shape
        mods = self.adaln(cond)[:, None, None, :].chunk(6, dim=-1)
        shift1, scale1, gate1, shift2, scale2, gate2 = mods
        if not (self.axis == "temporal" and temporal_identity):
            y = _modulate(self.norm1(x), shift1, scale1)
            if self.axis == "spatial":
                y = self.attn(y.reshape(b * f, s, h)).reshape(b, f, s, h)
            else:
                y = y.permute(0, 2, 1, 3).reshape(b * s, f, h)
                y = self.attn(y).reshape(b, s, f, h).permute(0, 2, 1, 3)
            x = x + gate1 * y
        x = x + gate2 * self.mlp(_modulate(self.norm2(x), shift2, scale2))
        return x


class WorldModel(nn.Module):
    """Latent-sequence noise predictor over t history + tau future frames."""

    def __init__(self, cfg: DiTConfig, latent_channels: int,
                 latent_hw: tuple[int, int], history_len: int, future_len: int,
                 layout_classes: int | None = None, layout_dim: int = 8):
        super().__init__()
        self.cfg = cfg
        self.latent_channels = latent_channels
        self.latent_hw = tuple(latent_hw)
        self.history_len = history_len
        self.future_len = future_len
        self.num_frames = history_len + future_len
        self.layout_classes = layout_classes
        self.layout_dim = layout_dim if layout_classes else 0
        s = self.latent_hw[0] * self.latent_hw[1]
        h = cfg.hidden

        self.in_proj = nn.Linear(latent_channels + self.layout_dim, h)
        self.pos_spatial = nn.Parameter(torch.zeros(1, 1, s, h))
        self.pos_temporal = nn.Parameter(torch.zeros(1, self.num_frames, 1, h))
        nn.init.normal_(self.pos_spatial, std=0.02)
        nn.init.normal_(self.pos_temporal, std=0.02)

        self.t_mlp = nn.Sequential(nn.Linear(h, h), nn.SiLU(), nn.Linear(h, h))
        self.traj_mlp = nn.Sequential(nn.Linear(4, h), nn.SiLU(), nn.Linear(h, h))
        self.null_traj = nn.Parameter(torch.zeros(h))
        nn.init.normal_(self.null_traj, std=0.02)
        if layout_classes:
            self.layout_proj = nn.Linear(layout_classes, layout_dim)

        self.blocks = nn.ModuleList([
            STBlock(h, cfg.heads, cfg.mlp_ratio,
                    "spatial" if i % 2 == 0 else "temporal")
            for i in range(cfg.depth)
        ])
        self.skip_fuse = nn.ModuleList([
            nn.Linear(2 * h, h) for _ in range(cfg.depth // 2)
        ])
        self.final_norm = nn.LayerNorm(h, elementwise_affine=False)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(h, 2 * h))
        self.final_proj = nn.Linear(h, latent_channels)
        nn.init.zeros_(self.final_ada[1].weight)
        nn.init.zeros_(self.final_ada[1].bias)
        nn.init.zeros_(self.final_proj.weight)
        nn.init.zeros_(self.final_proj.bias)

        # diagnostic mode: temporal attention and temporal position embedding
        # disabled, used by the frame-permutation equivariance harness
        self.diagnostic_temporal_identity = False

    def skip_pairs(self) -> list[tuple[int, int]]:
        """Architectural audit helper: 1-indexed (early, late) skip pairs."""
        n = self.cfg.depth
        return [(k, n + 1 - k) for k in range(1, n // 2 + 1)]

    def embed_conditions(self, t_step: torch.Tensor,
                         traj_features: torch.Tensor,
                         cond_flags: torch.Tensor,
                         pose_dropped: torch.Tensor,
                         layout: torch.Tensor | None = None) -> ConditionBundle:
        """Build the embedded bundle for one forward pass.

        Args:
            t_step: (B,) diffusion step indices.
            traj_features: (B, tau, 4) relative motion rows
                (dx, dy, sin dyaw, cos dyaw) for the future frames.
            cond_flags: (B, F) bool, True at clean history frames.
            pose_dropped: (B,) bool classifier-free slot.
            layout: optional (B, tau, H, W) integer BEV rasters.
        """
        b = t_step.shape[0]
        h = self.cfg.hidden
        if traj_features.shape[1] < self.future_len:
            raise ValueError(
                f"trajectory covers {traj_features.shape[1]} future frames, "
                f"need {self.future_len}")
        traj_features = traj_features[:, :self.future_len]
        t_emb = self.t_mlp(timestep_embedding(t_step, h).to(self.final_proj.weight.dtype))
        future_emb = self.traj_mlp(traj_features)
        null = self.null_traj.expand(b, self.future_len, h)
        future_emb = torch.where(pose_dropped[:, None, None], null, future_emb)
        traj_emb = torch.zeros(b, self.num_frames, h, dtype=future_emb.dtype,
                               device=future_emb.device)
        traj_emb[:, self.history_len:] = future_emb
        layout_emb = None
        if layout is not None:
            if self.layout_classes is None:
                raise ValueError("model was built without layout conditioning")
            h1, w1 = self.latent_hw
            pool = layout.shape[-2] // h1
            onehot = F.one_hot(layout.long(), self.layout_classes).float()
            onehot = onehot.permute(0, 1, 4, 2, 3)            # (B, tau, K, H, W)
            b_, tau = onehot.shape[:2]
            pooled = F.max_pool2d(onehot.flatten(0, 1), pool)  # (B*tau, K, H1, W1)
            feat = self.layout_proj(pooled.permute(0, 2, 3, 1))
            feat = feat.permute(0, 3, 1, 2).reshape(b_, tau, self.layout_dim, h1, w1)
            layout_emb = torch.zeros(b, self.num_frames, self.layout_dim, h1, w1,
                                     dtype=feat.dtype, device=feat.device)
            layout_emb[:, self.history_len:] = feat
        return ConditionBundle(
            timestep_embedding=t_emb, trajectory_embedding=traj_emb,
            cond_flags=cond_flags, pose_dropped=pose_dropped,
            layout_embedding=layout_emb)

    def tokenize(self, latents: torch.Tensor, bundle: ConditionBundle):
        """(B, F, C, H1, W1) -> (B, F, S, hidden) with position and per-frame
        trajectory conditioning added."""
        return tokenize_latents(self, latents, bundle)

    def global_condition(self, bundle: ConditionBundle) -> torch.Tensor:
        pooled = bundle.trajectory_embedding[:, self.history_len:].mean(dim=1)
        return bundle.timestep_embedding + pooled

    def forward(self, noisy: torch.Tensor, bundle: ConditionBundle,
                control: ControlFeatureStack | None = None) -> torch.Tensor:
        """Predicted noise for every frame, same shape as ``noisy``.

        Control features, when given, are added to the cached skip features of
        their target second-half block (future-frame positions only) before
        fusion; a freshly zero-initialized control path therefore leaves the
        output bit-identical.
        """
        b, f, c, h1, w1 = noisy.shape
        if f != self.num_frames:
            raise ValueError(f"expected {self.num_frames} frames, got {f}")
        if control is not None:
            control.validate(self.cfg.depth, self.future_len)
        x = self.tokenize(noisy, bundle)
        cond = self.global_condition(bundle)
        n = self.cfg.depth
        cache: list[torch.Tensor] = []
        for i, block in enumerate(self.blocks):
            if i < n // 2:
                x = block(x, cond, self.diagnostic_temporal_identity)
                cache.append(x)
            else:
                skip = cache[n - 1 - i]
                if control is not None:
                    feat = control.features[i + 1]
                    pad = torch.zeros_like(skip)
                    pad[:, self.history_len:] = feat
                    skip = skip + pad
                x = self.skip_fuse[i - n // 2](torch.cat([x, skip], dim=-1))
                x = block(x, cond, self.diagnostic_temporal_identity)
        shift, scale = self.final_ada(cond)[:, None, None, :].chunk(2, dim=-1)
        x = self.final_proj(_modulate(self.final_norm(x), shift, scale))
        return x.transpose(2, 3).reshape(b, f, c, h1, w1)
