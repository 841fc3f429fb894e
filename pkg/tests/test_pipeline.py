import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from dpr import checkpoint as ckpt
from dpr import pipeline
from dpr.cli import main
from dpr.data import load_labels, load_manifest
from dpr.pipeline import ConfigError, load_config
from dpr.selector import init_selector, threshold_mask


def tiny_overrides(tmp_path, **kw):
    cfg = {
        "dataset_dir": str(tmp_path / "data"),
        "out_dir": str(tmp_path / "run"),
        "train_count": 6,
        "val_count": 2,
        "image_size": 64,
        "scale": 2,
        "min_object_px": 8,
        "max_object_px": 12,
        "selector_embed_channels": 16,
        "selector_num_heads": 2,
        "selector_class_dim": 16,
        "selector_epochs": 3,
        "selector_batch_size": 4,
        "refiner_base_channels": 8,
        "refiner_channel_mults": [1, 2],
        "diffusion_steps": 10,
        "beta_start": 1e-3,
        "beta_end": 0.1,
        "refiner_train_steps": 30,
        "refiner_batch_size": 4,
        "refiner_lr": 1e-3,
        "sweep_taus": [0.3, 0.7],
        "seed": 0,
    }
    cfg.update(kw)
    return cfg


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny dataset + both checkpoints, shared across pipeline tests."""
    tmp_path = tmp_path_factory.mktemp("pipe")
    cfg = load_config(overrides=tiny_overrides(tmp_path))
    pipeline.run_generate_data(cfg)
    pipeline.run_train(cfg, "selector")
    pipeline.run_train(cfg, "refiner")
    return tmp_path, cfg


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config()
        assert cfg["tau"] == 0.5
        assert cfg["target_grid"] == 8

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(overrides={"not_a_key": 1})

    def test_file_and_include(self, tmp_path):
        base = tmp_path / "base.json"
        base.write_text(json.dumps({"tau": 0.4, "seed": 7}))
        child = tmp_path / "child.json"
        child.write_text(json.dumps({"include": "base.json", "seed": 9}))
        cfg = load_config(child)
        assert cfg["tau"] == 0.4      # inherited
        assert cfg["seed"] == 9       # overridden by the including file

    def test_single_include_level(self, tmp_path):
        a = tmp_path / "a.json"
        a.write_text(json.dumps({"include": "b.json"}))
        b = tmp_path / "b.json"
        b.write_text(json.dumps({"include": "a.json"}))
        with pytest.raises(ConfigError, match="one include level"):
            load_config(a)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")

    def test_geometry_validation(self, tmp_path):
        with pytest.raises(ConfigError, match="divisible"):
            load_config(overrides=tiny_overrides(tmp_path, image_size=60))

    def test_target_grid_must_be_a_scale(self, tmp_path):
        with pytest.raises(ConfigError, match="target_grid"):
            load_config(overrides=tiny_overrides(tmp_path, target_grid=16))


class TestGenerateData:
    def test_layout_and_determinism(self, tmp_path):
        for sub in ("x", "y"):
            cfg = load_config(overrides=tiny_overrides(
                tmp_path, dataset_dir=str(tmp_path / sub), train_count=3, val_count=1))
            manifest = pipeline.run_generate_data(cfg)
            assert len(manifest) == 4
        for rel in ("manifest.json", "annotations.jsonl", "images/img_00000.png",
                    "labels/img_00000.json"):
            assert (tmp_path / "x" / rel).exists()
            assert (tmp_path / "x" / rel).read_bytes() == (tmp_path / "y" / rel).read_bytes()

    def test_label_grids_match_selector_scales(self, tmp_path):
        cfg = load_config(overrides=tiny_overrides(tmp_path))
        pipeline.run_generate_data(cfg)
        labels = load_labels("img_00000", Path(cfg["dataset_dir"]) / "labels")
        assert [g.shape[0] for g in labels.grids] == pipeline.label_grids(cfg) == [8, 4, 2]

    def test_ratio_band_enforced(self, tmp_path):
        cfg = load_config(overrides=tiny_overrides(
            tmp_path, dataset_dir=str(tmp_path / "band"), train_count=4, val_count=2,
            target_ratio=0.02, ratio_low=0.0, ratio_high=0.05,
            min_object_px=2, max_object_px=6))
        manifest = pipeline.run_generate_data(cfg)
        assert all(0.0 <= e.object_pixel_ratio < 0.05 for e in manifest.entries)

    def test_zero_count(self, tmp_path):
        cfg = load_config(overrides=tiny_overrides(
            tmp_path, dataset_dir=str(tmp_path / "empty"), train_count=0, val_count=0))
        manifest = pipeline.run_generate_data(cfg)
        assert len(manifest) == 0
        assert load_manifest(Path(cfg["dataset_dir"]) / "manifest.json").entries == []


class TestTraining:
    def test_selector_outputs(self, trained):
        tmp_path, cfg = trained
        assert (tmp_path / "run" / "selector.npz").exists()
        history = (tmp_path / "run" / "selector_history.csv").read_text().splitlines()
        assert len(history) == 1 + cfg["selector_epochs"]
        assert "val_tpr" in history[0]

    def test_refiner_outputs(self, trained):
        tmp_path, _ = trained
        assert (tmp_path / "run" / "refiner.npz").exists()
        assert (tmp_path / "run" / "schedule.csv").exists()
        assert (tmp_path / "run" / "refiner_history.csv").exists()

    def test_refiner_requires_selector(self, tmp_path):
        cfg = load_config(overrides=tiny_overrides(tmp_path))
        pipeline.run_generate_data(cfg)
        with pytest.raises(ConfigError, match="selector.npz"):
            pipeline.run_train(cfg, "refiner")

    def test_zero_epochs_equals_initialization(self, trained):
        tmp_path, base_cfg = trained
        cfg = dict(base_cfg)
        cfg["selector_epochs"] = 0
        cfg["out_dir"] = str(tmp_path / "zero")
        path = pipeline.run_train(cfg, "selector")
        loaded = ckpt.load_selector(path)
        fresh = init_selector(pipeline.selector_config(cfg))
        for a, b in zip(loaded.parameters(), fresh.parameters()):
            assert torch.equal(a, b)

    def test_pair_count_matches_mask_statistics(self, trained):
        tmp_path, cfg = trained
        selector = ckpt.load_selector(tmp_path / "run" / "selector.npz")
        high, low, _ = pipeline._load_split(cfg, "train")
        pairs = pipeline.collect_refiner_pairs(cfg, selector, high, low)
        expected = 0
        for sample in low:
            scores = pipeline.selector_scores(selector, sample, cfg["target_grid"])
            expected += int(threshold_mask(scores, cfg["tau"]).grid.sum())
        assert len(pairs) == min(expected, cfg["max_refiner_pairs"])

    def test_unknown_stage(self, trained):
        _, cfg = trained
        with pytest.raises(ConfigError, match="stage"):
            pipeline.run_train(cfg, "detector")


class TestInference:
    def test_report_and_artifacts(self, trained):
        tmp_path, cfg = trained
        result = pipeline.run_infer(cfg)
        out = tmp_path / "run"
        for rel in ("report.json", "per_image.csv", "detections.jsonl",
                    "images/img_00006.png", "scores/img_00006.json"):
            assert (out / rel).exists(), rel
        report = json.loads((out / "report.json").read_text())
        for key in ("psnr", "ssim", "frechet", "kernel_mmd", "map", "map50", "tpr",
                    "precision", "flops_ratio", "refined_patch_fraction", "selection_tpr"):
            assert key in report
        assert report["images"] == 2
        assert report["skipped"] == []
        # refined fraction must equal the mask statistics exactly
        fractions = [row["selected_fraction"] for row in result.per_image]
        assert report["refined_patch_fraction"] == pytest.approx(np.mean(fractions), abs=1e-12)

    def test_patch_conservation(self, trained):
        tmp_path, cfg = trained
        result = pipeline.run_infer(cfg)
        g2 = cfg["target_grid"] ** 2
        for row in result.per_image:
            assert 0 <= row["selected_patches"] <= g2
            assert row["selected_fraction"] == row["selected_patches"] / g2

    def test_determinism(self, trained):
        tmp_path, cfg = trained
        a = pipeline.run_infer(cfg).report
        b = pipeline.run_infer(cfg).report
        a.pop("generated_at"), b.pop("generated_at")
        assert a == b

    def test_missing_checkpoint_is_config_error(self, tmp_path):
        cfg = load_config(overrides=tiny_overrides(tmp_path))
        pipeline.run_generate_data(cfg)
        with pytest.raises(ConfigError, match="checkpoint missing"):
            pipeline.run_infer(cfg)

    def rehomed(self, base_cfg, tmp_path, name, **kw):
        cfg = dict(base_cfg)
        cfg["selector_checkpoint"] = str(Path(base_cfg["out_dir"]) / "selector.npz")
        cfg["refiner_checkpoint"] = str(Path(base_cfg["out_dir"]) / "refiner.npz")
        cfg["cache_dir"] = str(Path(base_cfg["out_dir"]) / "score_cache")
        cfg["out_dir"] = str(tmp_path / name)
        cfg.update(kw)
        return cfg

    def test_tau_boundaries(self, trained):
        tmp_path, base_cfg = trained
        fractions = {}
        for tau in (0.02, 0.98):
            cfg = self.rehomed(base_cfg, tmp_path, f"b{tau}", tau=tau)
            report = pipeline.run_infer(cfg).report
            fractions[tau] = report["refined_patch_fraction"]
        assert fractions[0.02] >= fractions[0.98]

    def test_black_negatives_mode(self, trained):
        tmp_path, base_cfg = trained
        cfg = self.rehomed(base_cfg, tmp_path, "blackneg", assembly_mode="black_negatives")
        report = pipeline.run_infer(cfg).report
        assert np.isfinite(report["ssim"])


class TestSweep:
    def test_rows_and_monotonicity(self, trained):
        tmp_path, cfg = trained
        sweep = pipeline.run_sweep(cfg, taus=[0.7, 0.3, 0.5])
        taus = [r["tau"] for r in sweep.rows]
        assert taus == sorted(taus)
        fractions = [r["patch_fraction"] for r in sweep.rows]
        assert all(a >= b for a, b in zip(fractions, fractions[1:]))
        out = tmp_path / "run"
        assert (out / "sweep.csv").exists()
        for name in ("sweep_fraction_vs_map", "sweep_tpr_vs_tau"):
            assert (out / f"{name}.png").exists()
            assert (out / f"{name}.svg").exists()

    def test_cached_equals_fresh(self, trained):
        tmp_path, cfg = trained
        first = pipeline.run_sweep(cfg, taus=[0.4, 0.6])
        second = pipeline.run_sweep(cfg, taus=[0.4, 0.6])  # cache hits now
        assert first.rows == second.rows

    def test_duplicate_taus_identical_rows(self, trained):
        _, cfg = trained
        sweep = pipeline.run_sweep(cfg, taus=[0.5, 0.5])
        assert sweep.rows[0] == sweep.rows[1]

    def test_needs_two_thresholds(self, trained):
        _, cfg = trained
        with pytest.raises(ConfigError, match="2 thresholds"):
            pipeline.run_sweep(cfg, taus=[0.5])

    def test_env_cache_override(self, trained, tmp_path, monkeypatch):
        _, cfg = trained
        cache = tmp_path / "env_cache"
        monkeypatch.setenv("DPR_CACHE_DIR", str(cache))
        sub = dict(cfg)
        sub["selector_checkpoint"] = str(Path(cfg["out_dir"]) / "selector.npz")
        sub["refiner_checkpoint"] = str(Path(cfg["out_dir"]) / "refiner.npz")
        sub["out_dir"] = str(tmp_path / "envrun")
        pipeline.run_infer(sub)
        assert any(cache.glob("*.json"))


class TestEvaluateStage:
    def test_scores_stored_detections(self, trained):
        tmp_path, cfg = trained
        pipeline.run_infer(cfg)
        doc = pipeline.run_evaluate(cfg, tmp_path / "run" / "detections.jsonl")
        assert set(doc) == {"map", "map50", "tpr", "precision"}
        assert (tmp_path / "run" / "evaluation.json").exists()


class TestCli:
    def test_full_chain_exit_codes(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_overrides(
            tmp_path, train_count=4, val_count=1, selector_epochs=1,
            refiner_train_steps=5, diffusion_steps=4)))
        base = ["--config", str(cfg_path)]
        assert main(["generate-data", *base]) == 0
        assert main(["train-selector", *base]) == 0
        assert main(["train-refiner", *base]) == 0
        assert main(["infer", *base]) == 0
        dets = tmp_path / "run" / "detections.jsonl"
        assert main(["evaluate", *base, "--detections", str(dets)]) == 0
        assert main(["sweep", *base, "--taus", "0.4", "0.6"]) == 0

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"definitely_not_a_key": 1}))
        assert main(["infer", "--config", str(bad)]) == 2

    def test_missing_prerequisite_exit_code(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_overrides(tmp_path)))
        assert main(["generate-data", "--config", str(cfg_path)]) == 0
        assert main(["train-refiner", "--config", str(cfg_path)]) == 2

    def test_runtime_failure_exit_code(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_overrides(
            tmp_path, dataset_dir=str(tmp_path / "missing_parent/and_unwritable"))))
        cfg = json.loads(cfg_path.read_text())
        # point the dataset at a file to force a filesystem failure
        blocker = tmp_path / "blocker"
        blocker.write_text("x")
        cfg["dataset_dir"] = str(blocker / "sub")
        cfg_path.write_text(json.dumps(cfg))
        assert main(["generate-data", "--config", str(cfg_path)]) == 3

    def test_seed_and_out_overrides(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(tiny_overrides(
            tmp_path, train_count=2, val_count=1)))
        out = tmp_path / "other_out"
        assert main(["generate-data", "--config", str(cfg_path),
                     "--seed", "5", "--out", str(out)]) == 0

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "dpr", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        assert "generate-data" in proc.stdout
