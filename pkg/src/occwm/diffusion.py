"""DDPM schedule, forward noising, training objective, and strided sampling.

Condition frames (clean history) are exempt from noising and from the loss;
sampling pins them to their clean latents at every step. Classifier-free
guidance combines a trajectory-conditioned and a pose-dropped prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .controlnet import ControlAdapter, MaskStrategy, apply_control_mask
from .worldmodel import ConditionBundle, WorldModel

__all__ = [
    "NoiseSchedule",
    "SamplerConfig",
    "TrainSamplingPolicy",
    "DiffusionBatch",
    "make_schedule",
    "add_noise",
    "cfg_combine",
    "strided_timesteps",
    "training_loss",
    "sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta schedule with exact cumulative products (float64)."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty vector")
        if not (np.all(betas > 0) and np.all(betas < 1)
                and np.all(np.diff(betas) > 0)):
            raise ValueError("betas must be strictly increasing within (0, 1)")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def num_steps(self) -> int:
        return int(self.betas.size)

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at step t (1-indexed); alpha_bar(0) = 1."""
        bars = np.concatenate([[1.0], self.alpha_bars])
        return bars[np.asarray(t)]


def make_schedule(num_steps: int = 1000, kind: str = "linear") -> NoiseSchedule:
    """Linear betas from 1e-4 to 0.02 over ``num_steps`` training steps."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if num_steps == 1:
        betas = np.array([1e-4])
    else:
        betas = np.linspace(1e-4, 0.02, num_steps)
    return NoiseSchedule(betas)


@dataclass(frozen=True)
class SamplerConfig:
    inference_steps: int = 20
    guidance_scale: float = 7.5
    seed: int = 0

    def validate(self, schedule: NoiseSchedule) -> None:
        if not (1 <= self.inference_steps <= schedule.num_steps):
            raise ValueError(
                f"inference_steps must be in [1, {schedule.num_steps}]")


@dataclass(frozen=True)
class TrainSamplingPolicy:
    """Condition-frame subsets and pose-conditioning probability used when
    sampling training targets."""

    condition_frame_sets: tuple[tuple[int, ...], ...] = (
        (), (0,), (0, 1), (0, 1, 2), (0, 1, 2, 3))
    pose_condition_prob: float = 0.9


@dataclass
class DiffusionBatch:
    """Inputs for one training step, everything already latent/embedded-ready.

    ``latents`` covers all t+tau frames (clean); ``scene_conds`` and
    ``keep_masks`` are present when a control adapter participates.
    """

    latents: torch.Tensor                     # (B, F, C, H1, W1)
    traj_features: torch.Tensor               # (B, tau, 4)
    layout: torch.Tensor | None = None        # (B, tau, H, W) int
    scene_conds: torch.Tensor | None = None   # (B, tau, C, H1, W1)
    keep_masks: torch.Tensor | None = None    # (B, tau, H1, W1) bool


def add_noise(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
              schedule: NoiseSchedule,
              cond_flags: torch.Tensor | None = None) -> torch.Tensor:
    """q(x_t | x_0) = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, per batch element.

    Frames flagged as condition frames are returned bit-identical to x0."""
    ab = torch.as_tensor(schedule.alpha_bar(t.cpu().numpy()),
                         dtype=x0.dtype, device=x0.device)
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    if cond_flags is not None:
        keep = cond_flags.view(*cond_flags.shape, *
                               ([1] * (x0.dim() - cond_flags.dim())))
        x_t = torch.where(keep, x0, x_t)
    return x_t


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor,
                scale: float) -> torch.Tensor:
    """eps_uncond + scale * (eps_cond - eps_uncond); the scale 0 and 1
    endpoints return the inputs exactly."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional/unconditional shapes differ")
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def strided_timesteps(schedule: NoiseSchedule, inference_steps: int) -> list[int]:
    """Descending timestep indices, evenly strided over [1, T]. With
    inference_steps == T this is exactly T, T-1, ..., 1."""
    if not (1 <= inference_steps <= schedule.num_steps):
        raise ValueError("inference_steps outside [1, T]")
    ts = np.linspace(schedule.num_steps, 1, inference_steps)
    return [int(round(v)) for v in ts]


def _sqrt(v: float) -> float:
    # tolerate tiny negative round-off in 1 - ab_prev - var
    return float(np.sqrt(max(v, 0.0)))


def _compute_control(controlnet: ControlAdapter, batch_scene, keep_masks,
                     x_t, bundle, strategy: MaskStrategy, generator,
                     dropout_rate: float, training: bool):
    scene = batch_scene
    if strategy is MaskStrategy.MASK_CONDITION and keep_masks is not None:
        scene = scene * keep_masks.to(scene.dtype)[:, :, None]
    stack = controlnet(scene, x_t, bundle)
    return apply_control_mask(stack, keep_masks, strategy, generator=generator,
                              dropout_rate=dropout_rate, training=training)


def training_loss(wm: WorldModel, batch: DiffusionBatch,
                  schedule: NoiseSchedule, policy: TrainSamplingPolicy,
                  generator: torch.Generator,
                  controlnet: ControlAdapter | None = None,
                  mask_strategy: MaskStrategy = MaskStrategy.MASK_CONTROL,
                  dropout_rate: float = 0.3):
    """One noise-prediction loss draw.

    Samples a condition-frame set, drops the pose condition with probability
    1 - pose_condition_prob, noises the remaining frames at a uniform step,
    and returns the mean squared error against the true noise over
    non-condition frames only.

    Returns (loss, info dict with the drawn t / flags / pose_dropped).
    """
    x0 = batch.latents
    b, f = x0.shape[:2]
    device = x0.device
    sets = policy.condition_frame_sets
    set_idx = torch.randint(len(sets), (b,), generator=generator, device=device)
    flags = torch.zeros(b, f, dtype=torch.bool, device=device)
    for i in range(b):
        for frame in sets[int(set_idx[i])]:
            flags[i, frame] = True
    pose_dropped = (torch.rand(b, generator=generator, device=device)
                    >= policy.pose_condition_prob)
    t = torch.randint(1, schedule.num_steps + 1, (b,), generator=generator,
                      device=device)
    eps = torch.randn(x0.shape, generator=generator, device=device,
                      dtype=x0.dtype)
    x_t = add_noise(x0, t, eps, schedule, flags)
    bundle = wm.embed_conditions(t, batch.traj_features, flags, pose_dropped,
                                 batch.layout)
    control = None
    if controlnet is not None and batch.scene_conds is not None:
        control = _compute_control(controlnet, batch.scene_conds,
                                   batch.keep_masks, x_t, bundle,
                                   mask_strategy, generator, dropout_rate,
                                   training=True)
    eps_pred = wm(x_t, bundle, control=control)
    weight = (~flags).to(x0.dtype)[:, :, None, None, None]
    per_elem = (eps_pred - eps) ** 2 * weight
    loss = per_elem.sum() / (weight.sum() * x0.shape[2] * x0.shape[3] * x0.shape[4])
    info = {"t": t, "cond_flags": flags, "pose_dropped": pose_dropped,
            "eps": eps, "eps_pred": eps_pred}
    return loss, info


@torch.no_grad()
def sample(wm: WorldModel, history_latents: torch.Tensor,
           traj_features: torch.Tensor, schedule: NoiseSchedule,
           cfg: SamplerConfig, layout: torch.Tensor | None = None,
           controlnet: ControlAdapter | None = None,
           scene_conds: torch.Tensor | None = None,
           keep_masks: torch.Tensor | None = None,
           mask_strategy: MaskStrategy = MaskStrategy.MASK_CONTROL) -> torch.Tensor:
    """Strided ancestral DDPM sampling of the future-frame latents.

    History latents occupy their frames as clean condition inputs throughout;
    every randomness source derives from cfg.seed, so outputs are bit-exact
    reproducible. Returns (B, tau, C, H1, W1).
    """
    cfg.validate(schedule)
    device = history_latents.device
    b, t_len = history_latents.shape[:2]
    tau = wm.future_len
    if t_len != wm.history_len:
        raise ValueError(f"expected {wm.history_len} history frames, got {t_len}")
    generator = torch.Generator(device=device).manual_seed(cfg.seed)

    shape = (b, wm.num_frames, *history_latents.shape[2:])
    x = torch.zeros(shape, dtype=history_latents.dtype, device=device)
    x[:, :t_len] = history_latents
    x[:, t_len:] = torch.randn((b, tau, *shape[2:]), generator=generator,
                               dtype=x.dtype, device=device)
    flags = torch.zeros(b, wm.num_frames, dtype=torch.bool, device=device)
    flags[:, :t_len] = True
    dropped_no = torch.zeros(b, dtype=torch.bool, device=device)
    dropped_yes = torch.ones(b, dtype=torch.bool, device=device)

    steps = strided_timesteps(schedule, cfg.inference_steps)
    for i, t_now in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        tt = torch.full((b,), t_now, dtype=torch.long, device=device)

        def predict(dropped):
            bundle = wm.embed_conditions(tt, traj_features, flags, dropped,
                                         layout)
            control = None
            if controlnet is not None and scene_conds is not None:
                control = _compute_control(controlnet, scene_conds, keep_masks,
                                           x, bundle, mask_strategy,
                                           generator=None, dropout_rate=0.0,
                                           training=False)
            return wm(x, bundle, control=control)

        eps = predict(dropped_no)
        if cfg.guidance_scale != 1.0:
            eps = cfg_combine(eps, predict(dropped_yes), cfg.guidance_scale)

        ab_t = float(schedule.alpha_bar(t_now))
        ab_prev = float(schedule.alpha_bar(t_prev))
        x0_hat = (x - _sqrt(1.0 - ab_t) * eps) / _sqrt(ab_t)
        if t_prev == 0:
            x_next = x0_hat
        else:
            var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype,
                                device=device)
            x_next = (_sqrt(ab_prev) * x0_hat
                      + _sqrt(1.0 - ab_prev - var) * eps
                      + _sqrt(var) * noise)
        x = x_next
        x[:, :t_len] = history_latents  # condition frames stay pinned
    return x[:, t_len:]
