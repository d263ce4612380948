"""Training orchestration, evaluation harness, roll-out, and rendering.

Three stages sit on top of a trained VAE:

    stage 1  world model (DiT) on VAE latents, VAE frozen
    stage 2  scene-centric forecaster, CBGS sequence sampling
    stage 3  control adapter only; everything else frozen and audited

Checkpoints are versioned torch archives with a config fingerprint and stage
id, written atomically. All randomness flows from explicit seeds; resuming
restores optimizer and generator states so training continues bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .controlnet import ControlAdapter, MaskStrategy, apply_control_mask, controlnet_init
from .dataset import DatasetManifest, SequenceSample, cbgs_weights, iter_windows, load_manifest
from .diffusion import (
    DiffusionBatch,
    NoiseSchedule,
    SamplerConfig,
    TrainSamplingPolicy,
    make_schedule,
    sample,
    training_loss,
)
from .forecaster import (
    ForecasterConfig,
    SceneForecaster,
    align_history_labels,
    copy_last_baseline,
    forecaster_loss,
    project_to_future,
    scene_condition,
)
from .grid import (
    FeatureMask,
    GridSpec,
    OccupancyGrid,
    Pose,
    VisibilityVolume,
    accumulate_visibility,
    feature_mask,
    resample_grid,
)
from .metrics import MetricAccumulator, MetricReport
from .vae import OccVae, VaeConfig, vae_loss
from .worldmodel import DiTConfig, WorldModel, relative_trajectory_features

__all__ = [
    "StageParams",
    "RunConfig",
    "EvalOptions",
    "TrainResult",
    "RolloutResult",
    "load_config",
    "save_checkpoint",
    "load_checkpoint",
    "train_vae",
    "train_stage",
    "evaluate",
    "rollout",
    "render_bev",
]

CHECKPOINT_VERSION = 1

# Full-scale reference hyperparameters (epochs-based): world model 2000 epochs
# at total batch 128 and lr 2e-4; forecaster 12 epochs at batch 32 with CBGS;
# control adapter 1000 epochs at batch 64, lr 1e-4. The step-based defaults
# below are the desk-scale equivalents; everything is overridable.


@dataclass
class StageParams:
    steps: int
    batch_size: int
    learning_rate: float
    lr_schedule: str = "cosine"  # cosine | constant

    def validate(self):
        if self.steps < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid stage hyperparameters: {self}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class RunConfig:
    """Declarative run configuration; unknown keys are rejected on load."""

    dataset: str = ""
    out_dir: str = "runs/default"
    model_size: str = "toy"  # toy | small | base
    seed: int = 0
    grid: dict | None = None  # GridSpec override; must match the dataset
    history_len: int = 4
    future_len: int = 6
    use_layouts: bool = False
    mask_strategy: str = "mask_control"
    control_dropout_rate: float = 0.3
    mask_epsilon: float = 0.5
    train_diffusion_steps: int = 1000
    pose_condition_prob: float = 0.9
    inference_steps: int = 20
    guidance_scale: float = 7.5
    latent_channels: int | None = None
    dit_depth: int | None = None
    dit_hidden: int | None = None
    dit_heads: int | None = None
    vae: StageParams = field(default_factory=lambda: StageParams(1500, 2, 2e-3))
    stage1: StageParams = field(default_factory=lambda: StageParams(2000, 8, 2e-4))
    stage2: StageParams = field(default_factory=lambda: StageParams(1000, 8, 1e-4))
    stage3: StageParams = field(default_factory=lambda: StageParams(1000, 8, 1e-4))

    def validate(self):
        if self.model_size not in ("toy", "small", "base"):
            raise ValueError(f"unknown model_size {self.model_size!r}")
        if self.grid is not None:
            self.grid_spec()
        MaskStrategy(self.mask_strategy)
        if not (0 < self.mask_epsilon <= 1):
            raise ValueError("mask_epsilon must be in (0, 1]")
        if not (1 <= self.inference_steps <= self.train_diffusion_steps):
            raise ValueError("inference_steps outside [1, train_diffusion_steps]")
        for stage in (self.vae, self.stage1, self.stage2, self.stage3):
            stage.validate()
        return self

    def grid_spec(self) -> GridSpec | None:
        if self.grid is None:
            return None
        payload = dict(self.grid)
        payload["dims"] = tuple(payload["dims"])
        payload["origin"] = tuple(payload["origin"])
        return GridSpec(**payload)

    def check_manifest(self, manifest: DatasetManifest) -> DatasetManifest:
        override = self.grid_spec()
        if override is not None and override != manifest.spec:
            raise ValueError(f"config grid override {override} does not match "
                             f"dataset spec {manifest.spec}")
        return manifest

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        return SamplerConfig(inference_steps=self.inference_steps,
                             guidance_scale=self.guidance_scale,
                             seed=self.seed if seed is None else seed)

    def vae_config(self) -> VaeConfig:
        cfg = VaeConfig.toy() if self.model_size == "toy" else VaeConfig()
        if self.latent_channels is not None:
            cfg = dataclasses.replace(cfg, latent_channels=self.latent_channels)
        return cfg

    def dit_config(self) -> DiTConfig:
        named = {"toy": DiTConfig.toy, "small": DiTConfig.small,
                 "base": DiTConfig.base}[self.model_size]()
        overrides = {}
        if self.dit_depth is not None:
            overrides["depth"] = self.dit_depth
        if self.dit_hidden is not None:
            overrides["hidden"] = self.dit_hidden
        if self.dit_heads is not None:
            overrides["heads"] = self.dit_heads
        return dataclasses.replace(named, **overrides) if overrides else named

    def forecaster_config(self) -> ForecasterConfig:
        base = (ForecasterConfig.toy() if self.model_size == "toy"
                else ForecasterConfig())
        return dataclasses.replace(base, history_len=self.history_len,
                                   future_len=self.future_len)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.train_diffusion_steps)

    def strategy(self) -> MaskStrategy:
        return MaskStrategy(self.mask_strategy)


def _from_dict(cls, payload: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if fields[key].type == "StageParams" and isinstance(value, dict):
            kwargs[key] = _from_dict(StageParams, value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    """Load a JSON run configuration; unknown keys raise, overrides win."""
    with open(path) as f:
        payload = json.load(f)
    if overrides:
        payload.update(overrides)
    return _from_dict(RunConfig, payload).validate()


@dataclass
class EvalOptions:
    horizons: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    regions: tuple[str, ...] = ("visible", "invisible", "all")
    align_to_predicted_trajectory: bool = False

    def validate(self, future_len: int):
        if not self.horizons:
            raise ValueError("horizons must be non-empty")
        if any(not (1 <= h <= future_len) for h in self.horizons):
            raise ValueError(f"horizons outside [1, {future_len}]")
        for region in self.regions:
            if region not in ("visible", "invisible", "all"):
                raise ValueError(f"unknown region {region!r}")
        return self


@dataclass
class TrainResult:
    checkpoint_path: str
    losses: list[float]
    audits: list[dict] = field(default_factory=list)


@dataclass
class RolloutResult:
    frames: list[OccupancyGrid]
    poses: list[Pose]
    controlled_rolls: list[bool]
    roll_histories: list[list[OccupancyGrid]] = field(default_factory=list)

    @property
    def control_invocations(self) -> int:
        return sum(self.controlled_rolls)


def _fingerprint(parts: dict) -> str:
    return hashlib.sha256(
        json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path: str, stage: str, fingerprint: str, payload: dict) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    record = {"format_version": CHECKPOINT_VERSION, "stage": stage,
              "fingerprint": fingerprint, **payload}
    tmp = path + ".tmp"
    torch.save(record, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str, expect_stage: str | None = None) -> dict:
    record = torch.load(path, map_location="cpu", weights_only=False)
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    if expect_stage is not None and record.get("stage") != expect_stage:
        raise ValueError(f"{path}: stage {record.get('stage')!r}, "
                         f"expected {expect_stage!r}")
    return record


def _lr_at(params: StageParams, step: int) -> float:
    if params.lr_schedule == "constant":
        return params.learning_rate
    frac = 0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * step / params.steps))
    return params.learning_rate * frac


def _grids_tensor(grids: list[OccupancyGrid]) -> torch.Tensor:
    return torch.from_numpy(np.stack([g.labels for g in grids]).astype(np.int64))


def _restore_rng(record: dict, np_rng: np.random.Generator,
                 gen: torch.Generator | None):
    np_rng.bit_generator.state = record["np_rng_state"]
    if gen is not None and record.get("torch_gen_state") is not None:
        gen.set_state(record["torch_gen_state"])
    torch.set_rng_state(record["torch_rng_state"])


def _rng_payload(np_rng: np.random.Generator, gen: torch.Generator | None):
    return {
        "np_rng_state": np_rng.bit_generator.state,
        "torch_gen_state": gen.get_state() if gen is not None else None,
        "torch_rng_state": torch.get_rng_state(),
    }


# ---------------------------------------------------------------------------
# VAE training (prerequisite for stage 1)

def train_vae(cfg: RunConfig, manifest: DatasetManifest | None = None,
              out_path: str | None = None, resume_from: str | None = None,
              steps_override: int | None = None) -> TrainResult:
    torch.set_flush_denormal(True)
    cfg.validate()
    manifest = cfg.check_manifest(manifest or load_manifest(cfg.dataset))
    spec = manifest.spec
    params = cfg.vae
    total_steps = steps_override if steps_override is not None else params.steps
    fingerprint = _fingerprint({"stage": "vae", "vae": str(cfg.vae_config()),
                                "spec": str(spec), "seed": cfg.seed})

    frames = []
    for info in manifest.scenes("train"):
        grids, _ = _load_scene(manifest, info.scene_id)
        frames.extend(grids)
    data = _grids_tensor(frames)

    torch.manual_seed(cfg.seed)
    vae = OccVae(cfg.vae_config(), spec)
    opt = torch.optim.AdamW(vae.parameters(), lr=params.learning_rate)
    np_rng = np.random.default_rng(cfg.seed)
    start = 0
    if resume_from:
        record = load_checkpoint(resume_from, expect_stage="vae")
        if record["fingerprint"] != fingerprint:
            raise ValueError("fingerprint mismatch on resume")
        vae.load_state_dict(record["model"])
        opt.load_state_dict(record["optimizer"])
        _restore_rng(record, np_rng, None)
        start = record["step"]

    losses = []
    for step in range(start, total_steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(params, step)
        idx = np_rng.integers(0, len(frames), size=params.batch_size)
        labels = data[idx]
        post = vae.encode(labels)
        logits = vae.decode(post.mean)
        loss, _ = vae_loss(logits, labels, post, vae.cfg.kl_weight)
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(float(loss.detach()))

    out_path = out_path or os.path.join(cfg.out_dir, "vae.pt")
    save_checkpoint(out_path, "vae", fingerprint, {
        "model": vae.state_dict(),
        "optimizer": opt.state_dict(),
        "step": total_steps,
        "vae_config": dataclasses.asdict(vae.cfg),
        "spec": dataclasses.asdict(spec),
        **_rng_payload(np_rng, None),
    })
    return TrainResult(out_path, losses)


def load_vae(path: str) -> OccVae:
    record = load_checkpoint(path, expect_stage="vae")
    spec = GridSpec(**record["spec"])
    vae = OccVae(VaeConfig(**record["vae_config"]), spec)
    vae.load_state_dict(record["model"])
    vae.eval()
    return vae


# ---------------------------------------------------------------------------
# window preparation

def _load_scene(manifest, scene_id, layouts=False):
    from .dataset import load_sequence
    return load_sequence(manifest, scene_id, layouts=layouts)


@dataclass
class _WindowBank:
    """Precomputed per-window tensors shared by stages 1 and 3."""

    samples: list[SequenceSample]
    latents: torch.Tensor           # (W, F, C, H1, W1) unscaled posterior means
    traj: torch.Tensor              # (W, tau, 4)
    layouts: torch.Tensor | None    # (W, tau, H, W) int8
    scene_weights: np.ndarray       # per-window sampling weights


def _build_window_bank(cfg: RunConfig, manifest, vae, split="train",
                       balanced=False) -> _WindowBank:
    samples = iter_windows(manifest, t=cfg.history_len, tau=cfg.future_len,
                           split=split, layouts=cfg.use_layouts)
    if not samples:
        raise ValueError(f"no {split} windows in dataset")
    latents = []
    traj = []
    layouts = [] if cfg.use_layouts else None
    with torch.no_grad():
        cache: dict[tuple[str, int], torch.Tensor] = {}
        for s in samples:
            frames = s.history + s.future
            keys = [(s.scene_id, s.start + i) for i in range(len(frames))]
            missing = [i for i, k in enumerate(keys) if k not in cache]
            if missing:
                batch = _grids_tensor([frames[i] for i in missing])
                post = vae.encode(batch)
                for j, i in enumerate(missing):
                    cache[keys[i]] = post.mean[j]
            latents.append(torch.stack([cache[k] for k in keys]))
            traj.append(relative_trajectory_features(s.history_poses,
                                                     s.future_poses))
            if cfg.use_layouts:
                layouts.append(torch.from_numpy(
                    np.stack(s.layouts).astype(np.int64)))
    if balanced:
        seq_w = cbgs_weights(manifest, split=split)
        ids = [info.scene_id for info in manifest.scenes(split)]
        per_seq = {sid: seq_w[i] for i, sid in enumerate(ids)}
        counts = {sid: sum(1 for s in samples if s.scene_id == sid) for sid in ids}
        weights = np.array([per_seq[s.scene_id] / counts[s.scene_id]
                            for s in samples])
        weights = weights / weights.sum()
    else:
        weights = np.full(len(samples), 1.0 / len(samples))
    return _WindowBank(
        samples=samples,
        latents=torch.stack(latents),
        traj=torch.stack(traj),
        layouts=torch.stack(layouts) if layouts else None,
        scene_weights=weights,
    )


def keep_masks_for_sample(s: SequenceSample, h1: int, w1: int,
                          epsilon: float) -> tuple[list[FeatureMask],
                                                   list[VisibilityVolume]]:
    """Per-future-frame visibility volumes and pillar keep masks, computed
    once per sample from the history (fixed across diffusion steps)."""
    masks, vols = [], []
    for pose in s.future_poses:
        vol = accumulate_visibility(s.history, s.history_poses, pose)
        vols.append(vol)
        masks.append(feature_mask(vol, h1, w1, epsilon))
    return masks, vols


def _control_inputs(cfg, s: SequenceSample, forecaster, vae, latent_scale):
    """Scene-condition latents (scaled) and keep masks for one sample."""
    preds_t = forecaster.predict_grids(s.history, s.history_poses,
                                       s.history_poses[-1])
    preds = project_to_future(preds_t, s.history_poses[-1], s.future_poses)
    conds = scene_condition(preds, vae) / latent_scale
    h1, w1 = vae.latent_hw
    masks, _ = keep_masks_for_sample(s, h1, w1, cfg.mask_epsilon)
    keep = torch.from_numpy(np.stack([m.keep for m in masks]))
    return conds, keep


# ---------------------------------------------------------------------------
# stages

def train_stage(stage: int, cfg: RunConfig,
                vae_ckpt: str | None = None,
                stage1_ckpt: str | None = None,
                stage2_ckpt: str | None = None,
                manifest: DatasetManifest | None = None,
                out_path: str | None = None,
                resume_from: str | None = None,
                steps_override: int | None = None,
                audit_every: int = 1) -> TrainResult:
    """Run one training stage and write its checkpoint.

    Stage 1 trains the world model on frozen-VAE latents; stage 2 the
    forecaster with CBGS sequence sampling; stage 3 exclusively the control
    adapter, with a per-step audit that gradients reach adapter parameters and
    nothing else.
    """
    torch.set_flush_denormal(True)
    cfg.validate()
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2, or 3, got {stage}")
    manifest = cfg.check_manifest(manifest or load_manifest(cfg.dataset))
    if stage in (1, 3):
        if not vae_ckpt:
            raise ValueError(f"stage {stage} requires a VAE checkpoint")
    if stage == 3 and not (stage1_ckpt and stage2_ckpt):
        raise ValueError("stage 3 requires stage-1 and stage-2 checkpoints")
    out_path = out_path or os.path.join(cfg.out_dir, f"stage{stage}.pt")

    if stage == 1:
        return _train_worldmodel(cfg, manifest, vae_ckpt, out_path,
                                 resume_from, steps_override)
    if stage == 2:
        return _train_forecaster(cfg, manifest, out_path, resume_from,
                                 steps_override)
    return _train_controlnet(cfg, manifest, vae_ckpt, stage1_ckpt, stage2_ckpt,
                             out_path, resume_from, steps_override, audit_every)


def _train_worldmodel(cfg, manifest, vae_ckpt, out_path, resume_from,
                      steps_override):
    params = cfg.stage1
    total_steps = steps_override if steps_override is not None else params.steps
    vae = load_vae(vae_ckpt)
    spec = manifest.spec
    bank = _build_window_bank(cfg, manifest, vae)
    latent_scale = float(bank.latents.std())
    latents = bank.latents / latent_scale

    torch.manual_seed(cfg.seed)
    wm = WorldModel(cfg.dit_config(), vae.cfg.latent_channels, vae.latent_hw,
                    cfg.history_len, cfg.future_len,
                    layout_classes=spec.num_classes if cfg.use_layouts else None)
    fingerprint = _fingerprint({"stage": 1, "dit": str(cfg.dit_config()),
                                "spec": str(spec), "seed": cfg.seed,
                                "layouts": cfg.use_layouts})
    opt = torch.optim.AdamW(wm.parameters(), lr=params.learning_rate)
    np_rng = np.random.default_rng(cfg.seed + 1)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    schedule = cfg.schedule()
    policy = TrainSamplingPolicy(pose_condition_prob=cfg.pose_condition_prob)
    start = 0
    if resume_from:
        record = load_checkpoint(resume_from, expect_stage="stage1")
        if record["fingerprint"] != fingerprint:
            raise ValueError("fingerprint mismatch on resume")
        wm.load_state_dict(record["model"])
        opt.load_state_dict(record["optimizer"])
        _restore_rng(record, np_rng, gen)
        start = record["step"]

    losses = []
    for step in range(start, total_steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(params, step)
        idx = np_rng.choice(len(bank.samples), size=params.batch_size,
                            p=bank.scene_weights)
        batch = DiffusionBatch(
            latents=latents[idx],
            traj_features=bank.traj[idx],
            layout=bank.layouts[idx] if bank.layouts is not None else None)
        loss, _ = training_loss(wm, batch, schedule, policy, gen)
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(float(loss.detach()))

    save_checkpoint(out_path, "stage1", fingerprint, {
        "model": wm.state_dict(),
        "optimizer": opt.state_dict(),
        "step": total_steps,
        "dit_config": dataclasses.asdict(cfg.dit_config()),
        "latent_scale": latent_scale,
        "history_len": cfg.history_len,
        "future_len": cfg.future_len,
        "layout_classes": spec.num_classes if cfg.use_layouts else None,
        "latent_channels": vae.cfg.latent_channels,
        "latent_hw": list(vae.latent_hw),
        **_rng_payload(np_rng, gen),
    })
    return TrainResult(out_path, losses)


def load_worldmodel(path: str) -> tuple[WorldModel, float]:
    record = load_checkpoint(path, expect_stage="stage1")
    wm = WorldModel(DiTConfig(**record["dit_config"]),
                    record["latent_channels"], tuple(record["latent_hw"]),
                    record["history_len"], record["future_len"],
                    layout_classes=record["layout_classes"])
    wm.load_state_dict(record["model"])
    wm.eval()
    return wm, record["latent_scale"]


def _align_future(s: SequenceSample) -> np.ndarray:
    """Future gt frames resampled into the last history frame (loss space)."""
    anchor = s.history_poses[-1]
    out = []
    for grid, pose in zip(s.future, s.future_poses):
        resampled, _ = resample_grid(grid, pose, anchor)
        out.append(resampled.labels)
    return np.stack(out)


def _train_forecaster(cfg, manifest, out_path, resume_from, steps_override):
    params = cfg.stage2
    total_steps = steps_override if steps_override is not None else params.steps
    spec = manifest.spec
    samples = iter_windows(manifest, t=cfg.history_len, tau=cfg.future_len,
                           split="train")
    if not samples:
        raise ValueError("no train windows in dataset")
    aligned_in, aligned_gt = [], []
    for s in samples:
        labels, _, _ = align_history_labels(s.history, s.history_poses,
                                            s.history_poses[-1])
        aligned_in.append(labels)
        aligned_gt.append(_align_future(s))
    data_in = torch.from_numpy(np.stack(aligned_in).astype(np.int64))
    data_gt = torch.from_numpy(np.stack(aligned_gt).astype(np.int64))

    # CBGS: sample a sequence by class-balanced weight, then a window in it
    seq_w = cbgs_weights(manifest, split="train")
    ids = [info.scene_id for info in manifest.scenes("train")]
    per_seq = {sid: seq_w[i] for i, sid in enumerate(ids)}
    counts = {sid: sum(1 for s in samples if s.scene_id == sid) for sid in ids}
    weights = np.array([per_seq[s.scene_id] / counts[s.scene_id] for s in samples])
    weights = weights / weights.sum()

    torch.manual_seed(cfg.seed)
    net = SceneForecaster(cfg.forecaster_config(), spec)
    fingerprint = _fingerprint({"stage": 2, "cfg": str(cfg.forecaster_config()),
                                "spec": str(spec), "seed": cfg.seed})
    opt = torch.optim.AdamW(net.parameters(), lr=params.learning_rate)
    np_rng = np.random.default_rng(cfg.seed + 3)
    start = 0
    if resume_from:
        record = load_checkpoint(resume_from, expect_stage="stage2")
        if record["fingerprint"] != fingerprint:
            raise ValueError("fingerprint mismatch on resume")
        net.load_state_dict(record["model"])
        opt.load_state_dict(record["optimizer"])
        _restore_rng(record, np_rng, None)
        start = record["step"]

    losses = []
    for step in range(start, total_steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(params, step)
        idx = np_rng.choice(len(samples), size=params.batch_size, p=weights)
        loss = forecaster_loss(net(data_in[idx]), data_gt[idx])
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(float(loss.detach()))

    save_checkpoint(out_path, "stage2", fingerprint, {
        "model": net.state_dict(),
        "optimizer": opt.state_dict(),
        "step": total_steps,
        "forecaster_config": dataclasses.asdict(cfg.forecaster_config()),
        "spec": dataclasses.asdict(spec),
        **_rng_payload(np_rng, None),
    })
    return TrainResult(out_path, losses)


def load_forecaster(path: str) -> SceneForecaster:
    record = load_checkpoint(path, expect_stage="stage2")
    spec = GridSpec(**record["spec"])
    net = SceneForecaster(ForecasterConfig(**record["forecaster_config"]), spec)
    net.load_state_dict(record["model"])
    net.eval()
    return net


def _train_controlnet(cfg, manifest, vae_ckpt, stage1_ckpt, stage2_ckpt,
                      out_path, resume_from, steps_override, audit_every):
    params = cfg.stage3
    total_steps = steps_override if steps_override is not None else params.steps
    vae = load_vae(vae_ckpt)
    wm, latent_scale = load_worldmodel(stage1_ckpt)
    forecaster = load_forecaster(stage2_ckpt)
    for module in (vae, wm, forecaster):
        module.requires_grad_(False)
    bank = _build_window_bank(cfg, manifest, vae)
    latents = bank.latents / latent_scale

    scene_conds, keeps = [], []
    with torch.no_grad():
        for s in bank.samples:
            conds, keep = _control_inputs(cfg, s, forecaster, vae, latent_scale)
            scene_conds.append(conds)
            keeps.append(keep)
    scene_conds = torch.stack(scene_conds)
    keeps = torch.stack(keeps)

    torch.manual_seed(cfg.seed + 4)
    adapter = controlnet_init(wm)
    fingerprint = _fingerprint({"stage": 3, "dit": str(cfg.dit_config()),
                                "strategy": cfg.mask_strategy,
                                "seed": cfg.seed})
    opt = torch.optim.AdamW(adapter.parameters(), lr=params.learning_rate)
    np_rng = np.random.default_rng(cfg.seed + 5)
    gen = torch.Generator().manual_seed(cfg.seed + 6)
    schedule = cfg.schedule()
    policy = TrainSamplingPolicy(pose_condition_prob=cfg.pose_condition_prob)
    strategy = cfg.strategy()
    start = 0
    if resume_from:
        record = load_checkpoint(resume_from, expect_stage="stage3")
        if record["fingerprint"] != fingerprint:
            raise ValueError("fingerprint mismatch on resume")
        adapter.load_state_dict(record["model"])
        opt.load_state_dict(record["optimizer"])
        _restore_rng(record, np_rng, gen)
        start = record["step"]

    adapter_params = {id(p) for p in adapter.parameters()}
    frozen_params = [p for m in (vae, wm, forecaster) for p in m.parameters()]

    losses = []
    audits = []
    for step in range(start, total_steps):
        for group in opt.param_groups:
            group["lr"] = _lr_at(params, step)
        idx = np_rng.choice(len(bank.samples), size=params.batch_size,
                            p=bank.scene_weights)
        batch = DiffusionBatch(
            latents=latents[idx],
            traj_features=bank.traj[idx],
            layout=bank.layouts[idx] if bank.layouts is not None else None,
            scene_conds=scene_conds[idx],
            keep_masks=keeps[idx])
        loss, _ = training_loss(wm, batch, schedule, policy, gen,
                                controlnet=adapter, mask_strategy=strategy,
                                dropout_rate=cfg.control_dropout_rate)
        loss.backward()
        if step % audit_every == 0:
            received = [p for p in adapter.parameters() if p.grad is not None]
            audits.append({
                "step": step,
                "adapter_params": sum(1 for _ in adapter.parameters()),
                "received_grad": len(received),
                "nonzero_grad": sum(1 for p in received
                                    if bool((p.grad != 0).any())),
                "foreign_grads": sum(1 for p in frozen_params
                                     if p.grad is not None),
            })
        opt.step()
        opt.zero_grad()
        losses.append(float(loss.detach()))

    save_checkpoint(out_path, "stage3", fingerprint, {
        "model": adapter.state_dict(),
        "optimizer": opt.state_dict(),
        "step": total_steps,
        "mask_strategy": cfg.mask_strategy,
        "audits": audits,
        **_rng_payload(np_rng, gen),
    })
    return TrainResult(out_path, losses, audits)


def load_controlnet(path: str, wm: WorldModel) -> tuple[ControlAdapter, str]:
    record = load_checkpoint(path, expect_stage="stage3")
    adapter = controlnet_init(wm)
    adapter.load_state_dict(record["model"])
    adapter.eval()
    return adapter, record["mask_strategy"]


# ---------------------------------------------------------------------------
# evaluation

def _encode_history(vae, grids, latent_scale):
    with torch.no_grad():
        post = vae.encode(_grids_tensor(grids))
    return (post.mean / latent_scale)[None]


def _decode_future(vae, latents, latent_scale, spec):
    with torch.no_grad():
        logits = vae.decode(latents[0] * latent_scale)
        labels = logits.argmax(dim=1).numpy().astype(np.uint8)
    return [OccupancyGrid(spec, labels[i]) for i in range(labels.shape[0])]


def evaluate(cfg: RunConfig,
             vae_ckpt: str | None = None,
             stage1_ckpt: str | None = None,
             stage2_ckpt: str | None = None,
             stage3_ckpt: str | None = None,
             opts: EvalOptions | None = None,
             manifest: DatasetManifest | None = None,
             split: str = "val",
             override_future_poses=None,
             region_mask_fn=None,
             out_dir: str | None = None,
             max_samples: int | None = None) -> dict:
    """Evaluate each available model over the split and emit reports.

    Models: "forecaster" (stage 2 alone), "world_model" (stage 1 alone,
    sampled), "controlled" (stage 1 + stage 3 guidance). Region visibility is
    in-bounds observability of the four history frames unless
    ``region_mask_fn(sample, frame_idx) -> VisibilityVolume`` overrides it.

    ``override_future_poses(sample) -> list[Pose]`` substitutes the future
    trajectory (e.g. a planner output read from a poses file); with
    ``opts.align_to_predicted_trajectory`` the ground truth is resampled into
    those poses before comparison; without it the comparison happens at the
    original ground-truth frames.
    """
    torch.set_flush_denormal(True)
    cfg.validate()
    opts = (opts or EvalOptions()).validate(cfg.future_len)
    manifest = cfg.check_manifest(manifest or load_manifest(cfg.dataset))
    spec = manifest.spec
    wm = latent_scale = forecaster = adapter = vae = None
    if stage1_ckpt:
        if not vae_ckpt:
            raise ValueError("sampling evaluation needs a VAE checkpoint")
        vae = load_vae(vae_ckpt)
        wm, latent_scale = load_worldmodel(stage1_ckpt)
    if stage2_ckpt:
        forecaster = load_forecaster(stage2_ckpt)
    if stage3_ckpt:
        if wm is None or forecaster is None:
            raise ValueError("controlled evaluation needs stage-1 and stage-2 "
                             "checkpoints")
        adapter, trained_strategy = load_controlnet(stage3_ckpt, wm)
        strategy = MaskStrategy(trained_strategy)
    samples = iter_windows(manifest, t=cfg.history_len, tau=cfg.future_len,
                           split=split, layouts=cfg.use_layouts)
    if max_samples is not None:
        samples = samples[:max_samples]
    if not samples:
        raise ValueError(f"no {split} windows to evaluate")

    models = []
    if forecaster is not None:
        models.append("forecaster")
    if wm is not None:
        models.append("world_model")
    if adapter is not None:
        models.append("controlled")
    accs = {m: {r: MetricAccumulator(spec.num_classes, spec.free_class,
                                     cfg.future_len, r) for r in opts.regions}
            for m in models}
    schedule = cfg.schedule()

    for w_idx, s in enumerate(samples):
        eval_poses = (override_future_poses(s) if override_future_poses
                      else s.future_poses)
        if opts.align_to_predicted_trajectory and override_future_poses:
            gt = [resample_grid(g, pose, epose)[0]
                  for g, pose, epose in zip(s.future, s.future_poses, eval_poses)]
        else:
            gt = s.future
        gt_frames_poses = (eval_poses if
                           (opts.align_to_predicted_trajectory
                            and override_future_poses) else s.future_poses)
        if region_mask_fn is not None:
            vols = [region_mask_fn(s, i) for i in range(cfg.future_len)]
        else:
            vols = [accumulate_visibility(s.history, s.history_poses, pose)
                    for pose in gt_frames_poses]

        traj = relative_trajectory_features(s.history_poses, eval_poses)[None]
        layout = (torch.from_numpy(np.stack(s.layouts).astype(np.int64))[None]
                  if cfg.use_layouts and s.layouts else None)

        preds = {}
        if forecaster is not None:
            pred_t = forecaster.predict_grids(s.history, s.history_poses,
                                              s.history_poses[-1])
            preds["forecaster"] = project_to_future(
                pred_t, s.history_poses[-1], eval_poses)
        if wm is not None:
            hist_lat = _encode_history(vae, s.history, latent_scale)
            sampler = cfg.sampler_config(seed=cfg.seed + 1000 + w_idx)
            lat = sample(wm, hist_lat, traj, schedule, sampler, layout=layout)
            preds["world_model"] = _decode_future(vae, lat, latent_scale, spec)
            if adapter is not None:
                conds, keep = _control_inputs(
                    cfg, _sample_with_futures(s, eval_poses),
                    forecaster, vae, latent_scale)
                lat_c = sample(wm, hist_lat, traj, schedule, sampler,
                               layout=layout, controlnet=adapter,
                               scene_conds=conds[None], keep_masks=keep[None],
                               mask_strategy=strategy)
                preds["controlled"] = _decode_future(vae, lat_c, latent_scale,
                                                     spec)
        for model, frames in preds.items():
            for region in opts.regions:
                accs[model][region].add(frames, gt,
                                        vols if region != "all" else None)

    reports = {m: {r: accs[m][r].report() for r in opts.regions} for m in models}
    if out_dir:
        write_reports(reports, opts, out_dir)
    return reports


def _sample_with_futures(s: SequenceSample, future_poses) -> SequenceSample:
    return SequenceSample(history=s.history, history_poses=s.history_poses,
                          future=s.future, future_poses=list(future_poses),
                          layouts=s.layouts, scene_id=s.scene_id, start=s.start)


def report_rows(report: MetricReport, horizons) -> list[dict]:
    rows = []
    for h in horizons:
        iou, miou = report.per_horizon[h - 1]
        rows.append({"horizon": h, "iou": iou, "miou": miou})
    sel = [report.per_horizon[h - 1] for h in horizons]
    arr = np.asarray(sel, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        rows.append({"horizon": "avg",
                     "iou": float(np.nanmean(arr[:, 0])),
                     "miou": float(np.nanmean(arr[:, 1]))})
    return rows


def write_reports(reports: dict, opts: EvalOptions, out_dir: str) -> None:
    """Serialize one machine-readable and one human-readable report."""
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "horizons": list(opts.horizons),
        "align_to_predicted_trajectory": opts.align_to_predicted_trajectory,
        "note": ("synthetic-world evaluation; absolute values are not "
                 "comparable to real-data benchmarks, only trends"),
        "models": {
            model: {region: {"rows": report_rows(rep, opts.horizons),
                             **rep.to_dict()}
                    for region, rep in regions.items()}
            for model, regions in reports.items()
        },
    }
    tmp = os.path.join(out_dir, "report.json.tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1)
    os.replace(tmp, os.path.join(out_dir, "report.json"))

    lines = []
    for model, regions in reports.items():
        lines.append(f"== {model} ==")
        header = "region  " + "  ".join(f"{h:>10}" for h in
                                        [*opts.horizons, "avg"])
        lines.append(header + "   (IoU/mIoU x100)")
        for region, rep in regions.items():
            rows = report_rows(rep, opts.horizons)
            cells = "  ".join(
                f"{100 * r['iou']:5.1f}/{100 * r['miou']:4.1f}"
                if not (math.isnan(r["iou"]) and math.isnan(r["miou"]))
                else "   nan    " for r in rows)
            lines.append(f"{region:8s}{cells}")
        lines.append("")
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write("\n".join(lines))


# ---------------------------------------------------------------------------
# roll-out and rendering

def rollout(cfg: RunConfig, history: list[OccupancyGrid],
            history_poses: list[Pose], trajectory: list[Pose], rolls: int,
            vae: OccVae, wm: WorldModel, latent_scale: float,
            forecaster: SceneForecaster | None = None,
            adapter: ControlAdapter | None = None,
            strategy: MaskStrategy = MaskStrategy.MASK_CONTROL,
            use_control_first_roll_only: bool = True,
            max_frames: int | None = None) -> RolloutResult:
    """Iterated generation: each roll predicts tau frames; its last t decoded
    frames are re-encoded to become the next roll's history. ``max_frames``
    truncates the returned sequence (e.g. a 16-frame horizon from 3 rolls of
    6)."""
    torch.set_flush_denormal(True)
    t, tau = cfg.history_len, cfg.future_len
    if len(trajectory) < rolls * tau:
        raise ValueError(f"trajectory has {len(trajectory)} poses, "
                         f"{rolls * tau} needed for {rolls} rolls")
    if tau < t:
        raise ValueError("future_len must be >= history_len to re-seed rolls")
    schedule = cfg.schedule()
    frames: list[OccupancyGrid] = []
    poses: list[Pose] = []
    controlled: list[bool] = []
    roll_histories: list[list[OccupancyGrid]] = []
    cur_grids = list(history)
    cur_poses = list(history_poses)
    for r in range(rolls):
        roll_histories.append(list(cur_grids))
        future_poses = trajectory[r * tau:(r + 1) * tau]
        traj = relative_trajectory_features(cur_poses, future_poses)[None]
        hist_lat = _encode_history(vae, cur_grids, latent_scale)
        engage = (adapter is not None and forecaster is not None
                  and (r == 0 or not use_control_first_roll_only))
        sampler = cfg.sampler_config(seed=cfg.seed + 5000 + r)
        if engage:
            sample_obj = SequenceSample(history=cur_grids,
                                        history_poses=cur_poses,
                                        future=[], future_poses=list(future_poses),
                                        layouts=None, scene_id="rollout", start=0)
            conds, keep = _control_inputs(cfg, sample_obj, forecaster, vae,
                                          latent_scale)
            lat = sample(wm, hist_lat, traj, schedule, sampler,
                         controlnet=adapter, scene_conds=conds[None],
                         keep_masks=keep[None], mask_strategy=strategy)
        else:
            lat = sample(wm, hist_lat, traj, schedule, sampler)
        decoded = _decode_future(vae, lat, latent_scale, vae.spec)
        frames.extend(decoded)
        poses.extend(future_poses)
        controlled.append(engage)
        cur_grids = decoded[-t:]
        cur_poses = list(future_poses[-t:])
    if max_frames is not None:
        frames = frames[:max_frames]
        poses = poses[:max_frames]
    return RolloutResult(frames=frames, poses=poses,
                         controlled_rolls=controlled,
                         roll_histories=roll_histories)


def render_bev(grid: OccupancyGrid, palette, out_path: str,
               background=(20, 20, 20)) -> str:
    """Write a top-down PNG: each pixel takes the palette color of the highest
    occupied voxel in its column; free columns get the background color."""
    from PIL import Image

    if len(palette) < grid.spec.num_classes:
        raise ValueError(f"palette covers {len(palette)} classes, "
                         f"grid has {grid.spec.num_classes}")
    labels = grid.labels
    occupied = labels != grid.spec.free_class
    h, w, d = grid.spec.dims
    # index of the topmost occupied voxel per column
    top = d - 1 - np.argmax(occupied[:, :, ::-1], axis=2)
    any_occ = occupied.any(axis=2)
    img = np.tile(np.asarray(background, dtype=np.uint8), (h, w, 1))
    pal = np.asarray(palette, dtype=np.uint8)
    ii, jj = np.nonzero(any_occ)
    img[ii, jj] = pal[labels[ii, jj, top[ii, jj]]]
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    try:
        Image.fromarray(img).save(out_path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed writing BEV image {out_path}: {exc}") from exc
    return out_path
