"""Command-line entry points for data generation, training, and inference.

Subcommands: gen-data, train-vae, train-wm, train-forecaster,
train-controlnet, evaluate, generate, rollout, render. A declarative JSON
config (--config) provides RunConfig values; individual flags and repeated
--set key=value overrides win over the file. ``generate`` and ``rollout``
require --seed explicitly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .dataset import (
    DatasetBuildParams,
    build_dataset,
    iter_windows,
    load_manifest,
)
from .grid import OccupancyGrid
from .pipeline import (
    EvalOptions,
    RunConfig,
    _from_dict,
    evaluate,
    load_config,
    load_controlnet,
    load_forecaster,
    load_vae,
    load_worldmodel,
    render_bev,
    rollout,
    train_stage,
    train_vae,
)
from .synth import GeneratorParams


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key] = _parse_value(raw)
    for key in ("dataset", "out_dir", "model_size", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.config:
        return load_config(args.config, overrides)
    return _from_dict(RunConfig, overrides).validate()


def _add_common(p):
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any RunConfig key (repeatable)")
    p.add_argument("--dataset", help="dataset root directory")
    p.add_argument("--out-dir", dest="out_dir", help="run output directory")
    p.add_argument("--model-size", dest="model_size",
                   choices=["toy", "small", "base"])
    p.add_argument("--seed", type=int, default=None)


def _checkpoint_args(p, *names):
    for name in names:
        p.add_argument(f"--{name}", required=True,
                       help=f"path to the {name.replace('-', ' ')} checkpoint")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="occwm",
        description="occupancy world model with scene-centric forecasting control")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--val-scenes", type=int, default=4)
    p.add_argument("--duration", type=float, default=9.5)
    p.add_argument("--layouts", action="store_true")
    p.add_argument("--far-field", action="store_true",
                   help="unstructured content beyond a per-scene break")
    p.add_argument("--dynamic-fraction", type=float, default=None)

    for name, help_text in (("train-vae", "train the occupancy VAE"),
                            ("train-wm", "stage 1: train the world model"),
                            ("train-forecaster", "stage 2: train the forecaster"),
                            ("train-controlnet", "stage 3: train the control adapter")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--resume-from")
        p.add_argument("--steps", type=int, default=None,
                       help="override the configured step count")
        if name in ("train-wm", "train-controlnet"):
            p.add_argument("--vae-ckpt", required=True)
        if name == "train-controlnet":
            p.add_argument("--stage1-ckpt", required=True)
            p.add_argument("--stage2-ckpt", required=True)

    p = sub.add_parser("evaluate", help="per-horizon, per-region evaluation")
    _add_common(p)
    p.add_argument("--vae-ckpt", required=True)
    p.add_argument("--stage1-ckpt")
    p.add_argument("--stage2-ckpt")
    p.add_argument("--stage3-ckpt")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--horizons", type=int, nargs="+", default=None)
    p.add_argument("--regions", nargs="+",
                   default=["visible", "invisible", "all"])
    p.add_argument("--align-to-predicted-trajectory", action="store_true")
    p.add_argument("--predicted-poses",
                   help="poses.json with planner trajectories, one entry per "
                        "future frame of every window, in window order")
    p.add_argument("--split", default="val")
    p.add_argument("--max-samples", type=int, default=None)

    p = sub.add_parser("generate", help="sample one future sequence")
    _add_common(p)
    p.add_argument("--vae-ckpt", required=True)
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--stage2-ckpt")
    p.add_argument("--stage3-ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", default=None)
    p.add_argument("--start", type=int, default=0)

    p = sub.add_parser("rollout", help="long-horizon iterated generation")
    _add_common(p)
    p.add_argument("--vae-ckpt", required=True)
    p.add_argument("--stage1-ckpt", required=True)
    p.add_argument("--stage2-ckpt")
    p.add_argument("--stage3-ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--rolls", type=int, required=True)
    p.add_argument("--scene", default=None)
    p.add_argument("--control-all-rolls", action="store_true",
                   help="engage the control adapter on every roll, not only "
                        "the first")

    p = sub.add_parser("render", help="render a stored grid to a BEV PNG")
    p.add_argument("--dataset", required=True,
                   help="dataset root (provides grid spec and palette)")
    p.add_argument("--labels", required=True, help="path to a .labels file")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    return _dispatch(args)


def _require_seed(args):
    if args.seed is None:
        raise SystemExit(f"--seed is required for {args.command}")


def _dispatch(args) -> int:
    if args.command == "gen-data":
        cfg = _build_config(args) if (args.config or args.set) else RunConfig()
        seed = args.seed if args.seed is not None else cfg.seed
        generator = GeneratorParams(duration=args.duration,
                                    far_field=args.far_field,
                                    dynamic_fraction=args.dynamic_fraction)
        manifest = build_dataset(DatasetBuildParams(
            out_dir=args.out, num_scenes=args.scenes, generator=generator,
            seed=seed, val_scenes=args.val_scenes, layouts=args.layouts))
        print(f"wrote {len(manifest.sequences)} scenes to {args.out}")
        return 0

    if args.command == "render":
        manifest = load_manifest(args.dataset)
        from .dataset import _read_labels
        labels = _read_labels(args.labels, manifest.spec.dims)
        render_bev(OccupancyGrid(manifest.spec, labels), manifest.palette,
                   args.out)
        print(f"wrote {args.out}")
        return 0

    cfg = _build_config(args)

    if args.command == "train-vae":
        result = train_vae(cfg, resume_from=args.resume_from,
                           steps_override=args.steps)
        print(f"vae checkpoint: {result.checkpoint_path} "
              f"(final loss {result.losses[-1]:.4f})")
        return 0
    if args.command == "train-wm":
        result = train_stage(1, cfg, vae_ckpt=args.vae_ckpt,
                             resume_from=args.resume_from,
                             steps_override=args.steps)
        print(f"stage-1 checkpoint: {result.checkpoint_path} "
              f"(final loss {result.losses[-1]:.4f})")
        return 0
    if args.command == "train-forecaster":
        result = train_stage(2, cfg, resume_from=args.resume_from,
                             steps_override=args.steps)
        print(f"stage-2 checkpoint: {result.checkpoint_path} "
              f"(final loss {result.losses[-1]:.4f})")
        return 0
    if args.command == "train-controlnet":
        result = train_stage(3, cfg, vae_ckpt=args.vae_ckpt,
                             stage1_ckpt=args.stage1_ckpt,
                             stage2_ckpt=args.stage2_ckpt,
                             resume_from=args.resume_from,
                             steps_override=args.steps)
        print(f"stage-3 checkpoint: {result.checkpoint_path} "
              f"(final loss {result.losses[-1]:.4f})")
        return 0

    if args.command == "evaluate":
        opts = EvalOptions(
            horizons=tuple(args.horizons) if args.horizons
            else tuple(range(1, cfg.future_len + 1)),
            regions=tuple(args.regions),
            align_to_predicted_trajectory=args.align_to_predicted_trajectory)
        override = None
        if args.predicted_poses:
            override = _poses_file_override(args.predicted_poses, cfg)
        evaluate(cfg, vae_ckpt=args.vae_ckpt, stage1_ckpt=args.stage1_ckpt,
                 stage2_ckpt=args.stage2_ckpt, stage3_ckpt=args.stage3_ckpt,
                 opts=opts, split=args.split, out_dir=args.out,
                 override_future_poses=override,
                 max_samples=args.max_samples)
        print(f"reports written to {args.out}")
        return 0

    if args.command in ("generate", "rollout"):
        _require_seed(args)
        return _run_generation(args, cfg)
    raise SystemExit(f"unknown command {args.command}")


def _poses_file_override(path: str, cfg: RunConfig):
    from .dataset import _pose_from_dict
    with open(path) as f:
        entries = json.load(f)
    poses = [_pose_from_dict(e) for e in entries]
    state = {"cursor": 0}

    def override(sample):
        i = state["cursor"]
        if i + cfg.future_len > len(poses):
            raise ValueError(f"{path} provides {len(poses)} poses, ran out at "
                             f"window {i // cfg.future_len}")
        state["cursor"] += cfg.future_len
        return poses[i:i + cfg.future_len]

    return override


def _run_generation(args, cfg: RunConfig) -> int:
    from .controlnet import MaskStrategy
    from .pipeline import rollout as run_rollout

    manifest = load_manifest(cfg.dataset)
    vae = load_vae(args.vae_ckpt)
    wm, latent_scale = load_worldmodel(args.stage1_ckpt)
    forecaster = load_forecaster(args.stage2_ckpt) if args.stage2_ckpt else None
    adapter = strategy = None
    if args.stage3_ckpt:
        if forecaster is None:
            raise SystemExit("--stage3-ckpt requires --stage2-ckpt")
        adapter, trained = load_controlnet(args.stage3_ckpt, wm)
        strategy = MaskStrategy(trained)

    windows = iter_windows(manifest, t=cfg.history_len, tau=cfg.future_len,
                           split=None)
    if args.scene:
        windows = [w for w in windows if w.scene_id == args.scene]
    if not windows:
        raise SystemExit("no matching window found")
    start = getattr(args, "start", 0)
    window = next((w for w in windows if w.start == start), windows[0])
    cfg = dataclasses.replace(cfg, seed=args.seed)

    rolls = args.rolls if args.command == "rollout" else 1
    if args.command == "rollout":
        scene_poses = _scene_trajectory(manifest, window, cfg, rolls)
    else:
        scene_poses = list(window.future_poses)
    result = run_rollout(
        cfg, window.history, window.history_poses, scene_poses, rolls,
        vae=vae, wm=wm, latent_scale=latent_scale, forecaster=forecaster,
        adapter=adapter,
        strategy=strategy or MaskStrategy.MASK_CONTROL,
        use_control_first_roll_only=not getattr(args, "control_all_rolls", False))

    os.makedirs(args.out, exist_ok=True)
    from .dataset import _pose_to_dict, _write_labels
    for k, frame in enumerate(result.frames):
        _write_labels(os.path.join(args.out, f"frame_{k}.labels"), frame.labels)
    with open(os.path.join(args.out, "poses.json"), "w") as f:
        json.dump([_pose_to_dict(p) for p in result.poses], f, indent=1)
    render_bev(result.frames[-1], manifest.palette,
               os.path.join(args.out, "preview.png"))
    print(f"wrote {len(result.frames)} frames to {args.out} "
          f"(control rolls: {result.controlled_rolls})")
    return 0


def _scene_trajectory(manifest, window, cfg, rolls):
    """Future trajectory for rollout: continue the scene's recorded poses and
    extrapolate at constant velocity if the scene is too short."""
    from .dataset import load_sequence
    grids, poses = load_sequence(manifest, window.scene_id)
    needed = rolls * cfg.future_len
    future = poses[window.start + cfg.history_len:]
    if len(future) >= needed:
        return future[:needed]
    out = list(future)
    if len(poses) >= 2:
        last, prev = poses[-1], poses[-2]
        delta = last.translation - prev.translation
        dyaw = last.yaw - prev.yaw
    else:
        delta = np.zeros(3)
        dyaw = 0.0
    from .grid import Pose
    cur = out[-1] if out else window.history_poses[-1]
    while len(out) < needed:
        cur = Pose.from_xyyaw(cur.translation[0] + delta[0],
                              cur.translation[1] + delta[1],
                              cur.yaw + dyaw,
                              timestamp=cur.timestamp + 0.5)
        out.append(cur)
    return out


if __name__ == "__main__":
    sys.exit(main())
