"""Scene-centric future occupancy prediction.

History frames are rigidly aligned into the last observed frame, embedded and
folded (depth and time into channels), and passed through a 2D UNet that
predicts all future frames in that same fixed frame. Predictions are then
re-projected into each future ego frame and can be encoded by a frozen VAE
into per-frame condition latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import (
    GridSpec,
    OccupancyGrid,
    Pose,
    VisibilityVolume,
    accumulate_visibility,
    resample_grid,
    resample_labels,
)
from .vae import OccVae

__all__ = [
    "ForecasterConfig",
    "AlignedHistory",
    "SceneForecaster",
    "align_history_labels",
    "forecaster_loss",
    "project_to_future",
    "scene_condition",
    "copy_last_baseline",
]


@dataclass(frozen=True)
class ForecasterConfig:
    """UNet and embedding widths.

    ``stage_ratios`` are cumulative downsample factors per stage (five-stage
    encoder/decoder at full scale). Per-voxel class embeddings of width
    ``class_embed_dim`` are linearly reduced to ``reduced_embed_dim`` before
    depth and time are folded into channels.
    """

    class_embed_dim: int = 32
    reduced_embed_dim: int = 4
    stage_ratios: tuple[int, ...] = (1, 2, 4, 8, 16)
    stage_channels: tuple[int, ...] = (256, 512, 1024, 1024, 1024)
    temporal_conv_layers: int = 2
    history_len: int = 4
    future_len: int = 6

    def __post_init__(self):
        ratios = tuple(int(r) for r in self.stage_ratios)
        if not ratios or ratios[0] != 1:
            raise ValueError("stage_ratios must start at 1")
        for a, b in zip(ratios, ratios[1:]):
            if b != 2 * a:
                raise ValueError("stage_ratios must double per stage")
        if len(self.stage_channels) != len(ratios):
            raise ValueError("stage_channels and stage_ratios length mismatch")
        object.__setattr__(self, "stage_ratios", ratios)
        object.__setattr__(self, "stage_channels",
                           tuple(int(c) for c in self.stage_channels))

    @classmethod
    def toy(cls) -> "ForecasterConfig":
        return cls(stage_channels=(16, 32, 64, 64, 64))


@dataclass
class AlignedHistory:
    """History after rigid alignment into the target frame."""

    stacked: torch.Tensor                  # (B, t*D*r, H, W)
    per_frame_grids: list[OccupancyGrid]   # aligned labels, frame t
    visibility: VisibilityVolume


def align_history_labels(history: list[OccupancyGrid],
                         poses: list[Pose],
                         target: Pose):
    """Geometric half of history alignment: resample every frame into the
    target frame. Returns (aligned label stack (t, H, W, D), aligned grids,
    accumulated visibility)."""
    if not history or len(history) != len(poses):
        raise ValueError("history grids/poses must be non-empty, equal length")
    spec = history[0].spec
    aligned = []
    grids = []
    for grid, pose in zip(history, poses):
        labels, _ = resample_labels(grid.labels, spec, pose, target)
        aligned.append(labels)
        grids.append(OccupancyGrid(spec, labels))
    vis = accumulate_visibility(history, poses, target)
    return np.stack(aligned), grids, vis


class DoubleConv(nn.Module):
    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, ch_out), ch_out)

    def forward(self, x):
        x = F.silu(self.norm1(self.conv1(x)))
        return F.silu(self.norm2(self.conv2(x)))


class InterpConv(nn.Module):
    """Upsampling as nearest 2x interpolation followed by a 3x3 convolution."""

    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.conv = nn.Conv2d(ch_in, ch_out, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class SceneForecaster(nn.Module):
    """Depth-time-stacked UNet over aligned history labels.

    forward() consumes aligned integer labels of shape (B, t, H, W, D) and
    emits logits (B, tau, num_classes, H, W, D), all in the shared frame.
    """

    def __init__(self, cfg: ForecasterConfig, spec: GridSpec):
        super().__init__()
        h, w, d = spec.dims
        f = cfg.stage_ratios[-1]
        if h % f != 0 or w % f != 0:
            raise ValueError(f"grid dims ({h}, {w}) not divisible by {f}")
        self.cfg = cfg
        self.spec = spec
        t, r = cfg.history_len, cfg.reduced_embed_dim
        self.class_embed = nn.Embedding(spec.num_classes, cfg.class_embed_dim)
        self.embed_reduce = nn.Linear(cfg.class_embed_dim, r)

        in_ch = t * d * r
        # grouped 1x1 convs mixing the time/embedding channels within each
        # depth slice (channels are depth-major)
        temporal = []
        for _ in range(cfg.temporal_conv_layers):
            temporal.append(nn.Conv2d(in_ch, in_ch, 1, groups=d))
            temporal.append(nn.SiLU())
        self.temporal_mix = nn.Sequential(*temporal)

        chans = cfg.stage_channels
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = in_ch
        for i, ch in enumerate(chans):
            self.enc_blocks.append(DoubleConv(prev, ch))
            if i < len(chans) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        self.dec_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(len(chans) - 1)):
            self.ups.append(InterpConv(chans[i + 1], chans[i]))
            self.dec_blocks.append(DoubleConv(chans[i] * 2, chans[i]))
        tau = cfg.future_len
        self.head = nn.Conv2d(chans[0], tau * d * spec.num_classes, 1)

    def stack_embed(self, aligned_labels: torch.Tensor) -> torch.Tensor:
        """(B, t, H, W, D) int labels -> (B, t*D*r, H, W) real stack,
        channels depth-major so grouped temporal convs mix within a slice."""
        b, t, h, w, d = aligned_labels.shape
        emb = self.embed_reduce(self.class_embed(aligned_labels))  # (B,t,H,W,D,r)
        x = emb.permute(0, 4, 1, 5, 2, 3).reshape(b, -1, h, w)
        return x

    def forward(self, aligned_labels: torch.Tensor) -> torch.Tensor:
        b = aligned_labels.shape[0]
        h, w, d = self.spec.dims
        x = self.temporal_mix(self.stack_embed(aligned_labels))
        skips = []
        for i, block in enumerate(self.enc_blocks):
            x = block(x)
            if i < len(self.downs):
                skips.append(x)
                x = self.downs[i](x)
        for up, block, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            x = up(x)
            x = block(torch.cat([x, skip], dim=1))
        x = self.head(x)  # (B, tau*D*K, H, W)
        tau, k = self.cfg.future_len, self.spec.num_classes
        x = x.reshape(b, tau, d, k, h, w).permute(0, 1, 3, 4, 5, 2)
        return x

    def align_history(self, history: list[OccupancyGrid], poses: list[Pose],
                      target: Pose) -> AlignedHistory:
        """Full alignment including embedding; channel count = t * D * r."""
        labels, grids, vis = align_history_labels(history, poses, target)
        tensor = torch.from_numpy(labels.astype(np.int64))[None]
        device = self.class_embed.weight.device
        stacked = self.stack_embed(tensor.to(device))
        return AlignedHistory(stacked=stacked, per_frame_grids=grids,
                              visibility=vis)

    @torch.no_grad()
    def predict_grids(self, history: list[OccupancyGrid], poses: list[Pose],
                      target: Pose) -> list[OccupancyGrid]:
        """Argmax prediction for each future frame, still in the target frame."""
        labels, _, _ = align_history_labels(history, poses, target)
        tensor = torch.from_numpy(labels.astype(np.int64))[None]
        device = self.class_embed.weight.device
        logits = self.forward(tensor.to(device))
        pred = logits.argmax(dim=2)[0].cpu().numpy().astype(np.uint8)
        return [OccupancyGrid(self.spec, pred[i]) for i in range(pred.shape[0])]


def forecaster_loss(logits: torch.Tensor, gt_aligned: torch.Tensor) -> torch.Tensor:
    """Mean per-voxel cross-entropy over all future frames and voxels; the
    targets are the future frames resampled into the shared frame."""
    b, tau, k = logits.shape[:3]
    return F.cross_entropy(logits.reshape(b * tau, k, *logits.shape[3:]),
                           gt_aligned.reshape(b * tau, *gt_aligned.shape[2:]))


def project_to_future(preds: list[OccupancyGrid], p_t: Pose,
                      future_poses: list[Pose]) -> list[OccupancyGrid]:
    """Re-project shared-frame predictions into each future ego frame;
    out-of-bounds voxels become free."""
    if len(preds) != len(future_poses):
        raise ValueError("one predicted frame per future pose required")
    return [resample_grid(pred, p_t, pose)[0]
            for pred, pose in zip(preds, future_poses)]


def scene_condition(preds: list[OccupancyGrid], vae: OccVae) -> torch.Tensor:
    """Posterior-mean latents of predicted future frames, (tau, C, H1, W1).

    Deterministic: conditions never sample the posterior."""
    if preds and preds[0].spec != vae.spec:
        raise ValueError("prediction spec does not match the VAE spec")
    labels = torch.from_numpy(
        np.stack([p.labels for p in preds]).astype(np.int64))
    device = vae.class_embed.weight.device
    with torch.no_grad():
        post = vae.encode(labels.to(device))
    return post.mean


def copy_last_baseline(history: list[OccupancyGrid], poses: list[Pose],
                       future_poses: list[Pose]) -> list[OccupancyGrid]:
    """Ego-compensated copy of the last observed frame into each future pose."""
    last, last_pose = history[-1], poses[-1]
    return [resample_grid(last, last_pose, pose)[0] for pose in future_poses]
