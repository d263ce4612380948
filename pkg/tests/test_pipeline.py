import dataclasses
import json
import math
import os

import numpy as np
import pytest
import torch

from occwm.controlnet import MaskStrategy
from occwm.dataset import DatasetBuildParams, build_dataset, iter_windows, load_sequence
from occwm.grid import GridSpec, OccupancyGrid, Pose
from occwm.pipeline import (
    EvalOptions,
    RunConfig,
    StageParams,
    evaluate,
    load_checkpoint,
    load_config,
    load_controlnet,
    load_forecaster,
    load_vae,
    load_worldmodel,
    render_bev,
    rollout,
    save_checkpoint,
    train_stage,
    train_vae,
)
from occwm.synth import CLASS_PALETTE, GeneratorParams

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One tiny dataset and a few-step run of every stage, shared by tests."""
    root = tmp_path_factory.mktemp("run")
    manifest = build_dataset(DatasetBuildParams(
        out_dir=str(root / "ds"), num_scenes=3, seed=1, val_scenes=1,
        generator=GeneratorParams(duration=5.0)))
    cfg = RunConfig(dataset=str(root / "ds"), out_dir=str(root / "out"), seed=0,
                    vae=StageParams(6, 2, 1e-3),
                    stage1=StageParams(6, 2, 2e-4),
                    stage2=StageParams(6, 2, 1e-3),
                    stage3=StageParams(6, 2, 1e-3),
                    inference_steps=3, guidance_scale=2.0,
                    train_diffusion_steps=50)
    r_vae = train_vae(cfg, manifest)
    r1 = train_stage(1, cfg, vae_ckpt=r_vae.checkpoint_path, manifest=manifest)
    r2 = train_stage(2, cfg, manifest=manifest)
    r3 = train_stage(3, cfg, vae_ckpt=r_vae.checkpoint_path,
                     stage1_ckpt=r1.checkpoint_path,
                     stage2_ckpt=r2.checkpoint_path, manifest=manifest)
    return {"cfg": cfg, "manifest": manifest, "vae": r_vae, "s1": r1,
            "s2": r2, "s3": r3, "root": root}


class TestRunConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            RunConfig(model_size="huge").validate()
        with pytest.raises(ValueError):
            RunConfig(mask_strategy="sometimes").validate()
        with pytest.raises(ValueError):
            RunConfig(mask_epsilon=0.0).validate()
        with pytest.raises(ValueError):
            RunConfig(inference_steps=2000).validate()
        with pytest.raises(ValueError):
            RunConfig(stage1=StageParams(0, 1, 1e-3)).validate()

    def test_load_config_rejects_unknown_keys(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"dataset": "x", "learning_rate": 1.0}))
        with pytest.raises(ValueError, match="unknown config keys"):
            load_config(str(path))

    def test_load_config_nested_and_overrides(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({
            "dataset": "dsroot", "stage1": {"steps": 7, "batch_size": 3,
                                            "learning_rate": 1e-3}}))
        cfg = load_config(str(path), overrides={"seed": 9})
        assert cfg.dataset == "dsroot"
        assert cfg.stage1.steps == 7 and cfg.stage1.batch_size == 3
        assert cfg.seed == 9

    def test_grid_override_mismatch_rejected(self, tiny_run):
        cfg = dataclasses.replace(
            tiny_run["cfg"],
            grid={"dims": [32, 32, 8], "voxel_size": 0.5,
                  "origin": [-8, -8, -1], "num_classes": 8, "free_class": 0})
        with pytest.raises(ValueError, match="grid override"):
            train_vae(cfg, tiny_run["manifest"])

    def test_model_size_presets(self):
        cfg = RunConfig(model_size="small")
        assert cfg.dit_config().depth == 12
        cfg2 = RunConfig(model_size="toy", dit_depth=4, dit_hidden=64)
        dit = cfg2.dit_config()
        assert (dit.depth, dit.hidden) == (4, 64)


class TestCheckpoints:
    def test_save_load_roundtrip(self, tmp_path):
        path = str(tmp_path / "ck.pt")
        save_checkpoint(path, "stage1", "abc", {"value": torch.tensor([1.0])})
        record = load_checkpoint(path, expect_stage="stage1")
        assert record["fingerprint"] == "abc"
        assert record["value"].item() == 1.0

    def test_stage_mismatch_rejected(self, tmp_path):
        path = str(tmp_path / "ck.pt")
        save_checkpoint(path, "stage1", "abc", {})
        with pytest.raises(ValueError, match="stage"):
            load_checkpoint(path, expect_stage="stage2")

    def test_atomic_write_leaves_no_tmp(self, tmp_path):
        path = str(tmp_path / "ck.pt")
        save_checkpoint(path, "vae", "abc", {})
        assert not os.path.exists(path + ".tmp")

    def test_resume_fingerprint_mismatch(self, tiny_run):
        cfg = dataclasses.replace(tiny_run["cfg"], seed=999)
        with pytest.raises(ValueError, match="fingerprint"):
            train_vae(cfg, tiny_run["manifest"],
                      resume_from=tiny_run["vae"].checkpoint_path)


class TestTrainingContracts:
    def test_missing_prerequisites(self, tiny_run):
        cfg = tiny_run["cfg"]
        with pytest.raises(ValueError, match="VAE checkpoint"):
            train_stage(1, cfg, manifest=tiny_run["manifest"])
        with pytest.raises(ValueError, match="stage-1 and stage-2"):
            train_stage(3, cfg, vae_ckpt=tiny_run["vae"].checkpoint_path,
                        manifest=tiny_run["manifest"])
        with pytest.raises(ValueError, match="stage must be"):
            train_stage(4, cfg, vae_ckpt=tiny_run["vae"].checkpoint_path)

    def test_stage3_trainable_set_is_exactly_the_adapter(self, tiny_run):
        wm, _ = load_worldmodel(tiny_run["s1"].checkpoint_path)
        adapter, _ = load_controlnet(tiny_run["s3"].checkpoint_path, wm)
        audits = tiny_run["s3"].audits
        n_adapter = sum(1 for _ in adapter.parameters())
        assert audits, "stage 3 must record audits"
        for audit in audits:
            assert audit["adapter_params"] == n_adapter
            assert audit["received_grad"] == n_adapter
            assert audit["foreign_grads"] == 0
        # zero-init routes the very first step's nonzero gradients
        # exclusively through the output projections
        assert audits[0]["nonzero_grad"] == 2 * len(adapter.zero_projs)
        for audit in audits[1:]:
            assert audit["nonzero_grad"] == n_adapter

    def test_stage1_resume_reproduces_losses_bit_exactly(self, tiny_run):
        cfg = dataclasses.replace(tiny_run["cfg"])
        manifest = tiny_run["manifest"]
        vae_ckpt = tiny_run["vae"].checkpoint_path
        out_a = str(tiny_run["root"] / "resume_a.pt")
        full = train_stage(1, cfg, vae_ckpt=vae_ckpt, manifest=manifest,
                           out_path=out_a, steps_override=6)
        out_b = str(tiny_run["root"] / "resume_b.pt")
        half = train_stage(1, cfg, vae_ckpt=vae_ckpt, manifest=manifest,
                           out_path=out_b, steps_override=3)
        resumed = train_stage(1, cfg, vae_ckpt=vae_ckpt, manifest=manifest,
                              out_path=out_b, resume_from=out_b,
                              steps_override=6)
        assert half.losses == full.losses[:3]
        assert resumed.losses == full.losses[3:]
        state_a = load_checkpoint(out_a)["model"]
        state_b = load_checkpoint(out_b)["model"]
        for key in state_a:
            assert torch.equal(state_a[key], state_b[key])

    def test_identical_runs_identical_checkpoints(self, tiny_run):
        cfg = tiny_run["cfg"]
        manifest = tiny_run["manifest"]
        out_a = str(tiny_run["root"] / "det_a.pt")
        out_b = str(tiny_run["root"] / "det_b.pt")
        ra = train_stage(2, cfg, manifest=manifest, out_path=out_a,
                         steps_override=4)
        rb = train_stage(2, cfg, manifest=manifest, out_path=out_b,
                         steps_override=4)
        assert ra.losses == rb.losses
        sa = load_checkpoint(out_a)["model"]
        sb = load_checkpoint(out_b)["model"]
        for key in sa:
            assert torch.equal(sa[key], sb[key])

    def test_stage2_overfits_one_static_scene(self, tmp_path):
        manifest = build_dataset(DatasetBuildParams(
            out_dir=str(tmp_path / "static"), num_scenes=1, seed=5,
            generator=GeneratorParams(duration=5.5, num_agents=(0, 0),
                                      ego_speed=(1.0, 1.5))))
        cfg = RunConfig(dataset=str(tmp_path / "static"),
                        out_dir=str(tmp_path / "out"),
                        stage2=StageParams(200, 2, 4e-3))
        result = train_stage(2, cfg, manifest=manifest)
        initial = np.mean(result.losses[:5])
        final = np.mean(result.losses[-5:])
        assert final < 0.1 * initial


class TestEvaluate:
    def test_report_structure_and_averages(self, tiny_run):
        reports = evaluate(tiny_run["cfg"],
                           vae_ckpt=tiny_run["vae"].checkpoint_path,
                           stage1_ckpt=tiny_run["s1"].checkpoint_path,
                           stage2_ckpt=tiny_run["s2"].checkpoint_path,
                           stage3_ckpt=tiny_run["s3"].checkpoint_path,
                           manifest=tiny_run["manifest"],
                           out_dir=str(tiny_run["root"] / "report"),
                           max_samples=2)
        assert set(reports) == {"forecaster", "world_model", "controlled"}
        for regions in reports.values():
            assert set(regions) == {"visible", "invisible", "all"}
            for rep in regions.values():
                arr = np.asarray(rep.per_horizon, dtype=float)
                for col, avg in zip(arr.T, rep.average):
                    defined = col[~np.isnan(col)]
                    if defined.size:
                        assert abs(avg - defined.mean()) < 1e-9
                    else:
                        assert math.isnan(avg)
        assert os.path.exists(tiny_run["root"] / "report" / "report.json")
        assert os.path.exists(tiny_run["root"] / "report" / "report.txt")

    def test_partition_counts_sum_to_all(self, tiny_run):
        reports = evaluate(tiny_run["cfg"],
                           vae_ckpt=tiny_run["vae"].checkpoint_path,
                           stage2_ckpt=tiny_run["s2"].checkpoint_path,
                           manifest=tiny_run["manifest"], max_samples=2)
        regions = reports["forecaster"]
        assert np.array_equal(
            regions["visible"].class_intersection
            + regions["invisible"].class_intersection,
            regions["all"].class_intersection)
        assert np.array_equal(
            regions["visible"].class_union + regions["invisible"].class_union,
            regions["all"].class_union)

    def test_forecaster_against_itself_scores_one(self, tmp_path, monkeypatch):
        # static scene, stationary ego: the future equals the last history
        # frame, so a copy-forecaster reproduces the ground truth exactly
        manifest = build_dataset(DatasetBuildParams(
            out_dir=str(tmp_path / "static"), num_scenes=1, seed=2,
            generator=GeneratorParams(duration=5.0, num_agents=(0, 0),
                                      ego_speed=(0.0, 0.0))))
        cfg = RunConfig(dataset=str(tmp_path / "static"),
                        out_dir=str(tmp_path / "out"),
                        stage2=StageParams(2, 1, 1e-3))
        r2 = train_stage(2, cfg, manifest=manifest)
        from occwm.forecaster import SceneForecaster

        def copy_history(self, history, poses, target):
            return [history[-1]] * cfg.future_len

        monkeypatch.setattr(SceneForecaster, "predict_grids", copy_history)
        reports = evaluate(cfg, vae_ckpt=None, stage2_ckpt=r2.checkpoint_path,
                           manifest=manifest, split="train", max_samples=1)
        for region, rep in reports["forecaster"].items():
            for iou, miou in rep.per_horizon:
                if not math.isnan(miou):
                    assert miou == 1.0
                if not math.isnan(iou):
                    assert iou == 1.0

    def test_identity_alignment_matches_unaligned(self, tiny_run):
        common = dict(vae_ckpt=tiny_run["vae"].checkpoint_path,
                      stage2_ckpt=tiny_run["s2"].checkpoint_path,
                      manifest=tiny_run["manifest"], max_samples=2)
        plain = evaluate(tiny_run["cfg"], opts=EvalOptions(), **common)
        aligned = evaluate(
            tiny_run["cfg"],
            opts=EvalOptions(align_to_predicted_trajectory=True),
            override_future_poses=lambda s: list(s.future_poses), **common)
        for region in ("visible", "invisible", "all"):
            a = plain["forecaster"][region]
            b = aligned["forecaster"][region]
            assert a.per_horizon == b.per_horizon

    def test_eval_mask_override_hook(self, tiny_run):
        from occwm.grid import VisibilityVolume
        spec = tiny_run["manifest"].spec

        def all_visible(sample, idx):
            return VisibilityVolume(spec, np.ones(spec.dims, dtype=bool))

        reports = evaluate(tiny_run["cfg"],
                           vae_ckpt=tiny_run["vae"].checkpoint_path,
                           stage2_ckpt=tiny_run["s2"].checkpoint_path,
                           manifest=tiny_run["manifest"], max_samples=1,
                           region_mask_fn=all_visible)
        inv = reports["forecaster"]["invisible"]
        assert all(math.isnan(i) and math.isnan(m) for i, m in inv.per_horizon)

    def test_options_validated(self, tiny_run):
        with pytest.raises(ValueError):
            EvalOptions(horizons=()).validate(6)
        with pytest.raises(ValueError):
            EvalOptions(horizons=(7,)).validate(6)
        with pytest.raises(ValueError):
            EvalOptions(regions=("everywhere",)).validate(6)


class TestRollout:
    @pytest.fixture(scope="class")
    def loaded(self, tiny_run):
        vae = load_vae(tiny_run["vae"].checkpoint_path)
        wm, scale = load_worldmodel(tiny_run["s1"].checkpoint_path)
        forecaster = load_forecaster(tiny_run["s2"].checkpoint_path)
        adapter, strategy = load_controlnet(tiny_run["s3"].checkpoint_path, wm)
        window = iter_windows(tiny_run["manifest"], split="train")[0]
        grids, poses = load_sequence(tiny_run["manifest"], window.scene_id)
        trajectory = poses[4:10] * 3  # reuse poses; geometry not under test
        return dict(vae=vae, wm=wm, scale=scale, forecaster=forecaster,
                    adapter=adapter, strategy=MaskStrategy(strategy),
                    window=window, trajectory=trajectory)

    def test_single_roll_matches_generation_length(self, tiny_run, loaded):
        res = rollout(tiny_run["cfg"], loaded["window"].history,
                      loaded["window"].history_poses, loaded["trajectory"], 1,
                      vae=loaded["vae"], wm=loaded["wm"],
                      latent_scale=loaded["scale"])
        assert len(res.frames) == 6
        assert res.controlled_rolls == [False]

    def test_two_rolls_window_and_control_contract(self, tiny_run, loaded):
        res = rollout(tiny_run["cfg"], loaded["window"].history,
                      loaded["window"].history_poses, loaded["trajectory"], 2,
                      vae=loaded["vae"], wm=loaded["wm"],
                      latent_scale=loaded["scale"],
                      forecaster=loaded["forecaster"],
                      adapter=loaded["adapter"], strategy=loaded["strategy"],
                      use_control_first_roll_only=True)
        assert len(res.frames) == 12
        assert res.controlled_rolls == [True, False]
        assert res.control_invocations == 1
        # roll 2's history window is the last t generated frames of roll 1
        t, tau = tiny_run["cfg"].history_len, tiny_run["cfg"].future_len
        for hist_grid, gen_grid in zip(res.roll_histories[1],
                                       res.frames[tau - t:tau]):
            assert np.array_equal(hist_grid.labels, gen_grid.labels)

    def test_truncation_to_sixteen_frames(self, tiny_run, loaded):
        res = rollout(tiny_run["cfg"], loaded["window"].history,
                      loaded["window"].history_poses, loaded["trajectory"], 3,
                      vae=loaded["vae"], wm=loaded["wm"],
                      latent_scale=loaded["scale"], max_frames=16)
        assert len(res.frames) == 16
        assert len(res.poses) == 16

    def test_short_trajectory_rejected(self, tiny_run, loaded):
        with pytest.raises(ValueError, match="trajectory"):
            rollout(tiny_run["cfg"], loaded["window"].history,
                    loaded["window"].history_poses,
                    loaded["trajectory"][:10], 2,
                    vae=loaded["vae"], wm=loaded["wm"],
                    latent_scale=loaded["scale"])


class TestRenderBev:
    def _read(self, path):
        from PIL import Image
        return np.asarray(Image.open(path))

    def test_all_free_uniform_background(self, tmp_path, toy_spec):
        grid = OccupancyGrid(toy_spec, np.zeros(toy_spec.dims, dtype=np.uint8))
        out = render_bev(grid, CLASS_PALETTE, str(tmp_path / "free.png"),
                         background=(7, 8, 9))
        img = self._read(out)
        assert (img == [7, 8, 9]).all()

    def test_single_voxel_colors_single_pixel(self, tmp_path, toy_spec):
        labels = np.zeros(toy_spec.dims, dtype=np.uint8)
        labels[10, 20, 3] = 2
        grid = OccupancyGrid(toy_spec, labels)
        out = render_bev(grid, CLASS_PALETTE, str(tmp_path / "one.png"))
        img = self._read(out)
        assert tuple(img[10, 20]) == CLASS_PALETTE[2]
        mask = np.ones(img.shape[:2], dtype=bool)
        mask[10, 20] = False
        assert (img[mask] == [20, 20, 20]).all()

    def test_topmost_voxel_wins(self, tmp_path, toy_spec):
        labels = np.zeros(toy_spec.dims, dtype=np.uint8)
        labels[5, 5, 1] = 1
        labels[5, 5, 4] = 3
        grid = OccupancyGrid(toy_spec, labels)
        out = render_bev(grid, CLASS_PALETTE, str(tmp_path / "stack.png"))
        assert tuple(self._read(out)[5, 5]) == CLASS_PALETTE[3]

    def test_palette_must_cover_classes(self, tmp_path, toy_spec):
        grid = OccupancyGrid(toy_spec, np.zeros(toy_spec.dims, dtype=np.uint8))
        with pytest.raises(ValueError, match="palette"):
            render_bev(grid, CLASS_PALETTE[:4], str(tmp_path / "bad.png"))
