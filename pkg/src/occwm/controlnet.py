"""Trainable half-copy of the world model emitting masked control features.

The adapter deep-copies the first N/2 spatio-temporal blocks (plus the token
input pipeline) of a trained world model and pairs each copied block with a
zero-initialized projection. After copied block k the k-th projection emits
the control feature destined for world-model block N+1-k, so a freshly
initialized adapter contributes exactly nothing. Condition embedders are not
copied: the adapter consumes the already-embedded bundle from the (frozen)
world model.
"""

from __future__ import annotations

import copy
import enum

import torch
import torch.nn as nn

from .worldmodel import (
    ConditionBundle,
    ControlFeatureStack,
    WorldModel,
    tokenize_latents,
)

__all__ = ["MaskStrategy", "ControlAdapter", "controlnet_init",
           "apply_control_mask"]


class MaskStrategy(enum.Enum):
    """How visibility gates the control path.

    mask_control (default): multiply emitted control features by the keep
    mask. mask_condition: mask the scene-condition latents before the adapter
    instead (feature masking becomes identity). random_dropout: keep mask
    additionally zeroed per cell with the configured rate, training only.
    no_mask: identity.
    """

    NO_MASK = "no_mask"
    MASK_CONDITION = "mask_condition"
    RANDOM_DROPOUT = "random_dropout"
    MASK_CONTROL = "mask_control"


class ControlAdapter(nn.Module):
    """Half-depth trainable copy over scene-condition-augmented latents."""

    def __init__(self, wm: WorldModel):
        super().__init__()
        if wm.cfg.depth % 2 != 0:
            raise ValueError("world model depth must be even")
        self.cfg = wm.cfg
        self.history_len = wm.history_len
        self.future_len = wm.future_len
        self.num_frames = wm.num_frames
        self.layout_dim = wm.layout_dim
        self.diagnostic_temporal_identity = False

        half = wm.cfg.depth // 2
        self.in_proj = copy.deepcopy(wm.in_proj)
        self.pos_spatial = nn.Parameter(wm.pos_spatial.detach().clone())
        self.pos_temporal = nn.Parameter(wm.pos_temporal.detach().clone())
        self.blocks = nn.ModuleList(
            copy.deepcopy(wm.blocks[i]) for i in range(half))
        self.zero_projs = nn.ModuleList()
        for _ in range(half):
            proj = nn.Linear(wm.cfg.hidden, wm.cfg.hidden)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.zero_projs.append(proj)
        # copies must be independently trainable even when built from an
        # already-frozen world model (deepcopy keeps requires_grad flags)
        self.requires_grad_(True)
        self._future_slice = slice(self.history_len, None)

    def forward(self, scene_conds: torch.Tensor, noisy: torch.Tensor,
                bundle: ConditionBundle) -> ControlFeatureStack:
        """Encode scene conditions into per-block control features.

        The adapter sees the full frame sequence: history slots carry the
        clean history latents from ``noisy`` unchanged, future slots carry
        noisy future latents plus the scene-condition latents (elementwise
        sum). Features are emitted for the future frames only.
        """
        if scene_conds.shape[1] != self.future_len:
            raise ValueError(
                f"expected {self.future_len} scene-condition frames, "
                f"got {scene_conds.shape[1]}")
        if noisy.shape[1] != self.num_frames:
            raise ValueError(
                f"expected {self.num_frames} latent frames, got {noisy.shape[1]}")
        if scene_conds.shape[2:] != noisy.shape[2:]:
            raise ValueError("scene-condition and latent shapes differ")
        x_in = noisy.clone()
        x_in[:, self._future_slice] = x_in[:, self._future_slice] + scene_conds
        x = tokenize_latents(self, x_in, bundle)
        pooled = bundle.trajectory_embedding[:, self.history_len:].mean(dim=1)
        cond = bundle.timestep_embedding + pooled
        n = self.cfg.depth
        features: dict[int, torch.Tensor] = {}
        for k, (block, proj) in enumerate(zip(self.blocks, self.zero_projs)):
            x = block(x, cond, self.diagnostic_temporal_identity)
            features[n - k] = proj(x[:, self._future_slice])
        return ControlFeatureStack(features)


def controlnet_init(wm: WorldModel) -> ControlAdapter:
    """Build the adapter from a trained world model.

    Blocks 1..N/2 and the token pipeline are deep copies (independently
    trainable; the world model is untouched); the N/2 output projections start
    at exactly zero."""
    return ControlAdapter(wm)


def apply_control_mask(stack: ControlFeatureStack,
                       keep_masks: torch.Tensor | None,
                       strategy: MaskStrategy,
                       generator: torch.Generator | None = None,
                       dropout_rate: float = 0.3,
                       training: bool = True) -> ControlFeatureStack:
    """Gate control features by per-frame keep masks.

    ``keep_masks`` is (B, tau, H1, W1) bool, True where features are kept;
    it broadcasts over channels and blocks. Strategies no_mask and
    mask_condition leave the stack untouched here (the latter is wired
    upstream of the adapter).
    """
    if strategy in (MaskStrategy.NO_MASK, MaskStrategy.MASK_CONDITION):
        return stack
    if keep_masks is None:
        raise ValueError(f"strategy {strategy.value} requires keep masks")
    any_feat = next(iter(stack.features.values()))
    b, tau, s, _ = any_feat.shape
    if keep_masks.shape[0] != b or keep_masks.shape[1] != tau:
        raise ValueError(f"keep masks cover {tuple(keep_masks.shape[:2])}, "
                         f"features are {(b, tau)}")
    if keep_masks.shape[2] * keep_masks.shape[3] != s:
        raise ValueError("keep mask cells do not match feature tokens")
    keep = keep_masks.reshape(b, tau, s, 1).to(any_feat.dtype)
    if strategy is MaskStrategy.RANDOM_DROPOUT and training:
        if generator is None:
            raise ValueError("random_dropout in training requires a generator")
        drop = (torch.rand(b, tau, keep_masks.shape[2], keep_masks.shape[3],
                           generator=generator, device=any_feat.device)
                >= dropout_rate).to(any_feat.dtype).reshape(b, tau, s, 1)
        keep = keep * drop
    return ControlFeatureStack(
        {n: feat * keep for n, feat in stack.features.items()})
