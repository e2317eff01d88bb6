"""Run configs, training loops, ablation sweeps, and the CLI surface."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import pointseq.cli as cli
import pointseq.encoder as enc
import pointseq.report as report
import pointseq.train as train
from pointseq.data import ShapeSpec, generate_dataset


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata")
    generate_dataset(root, ShapeSpec(points_per_cloud=64, noise_std=0.02), count=24, seed=5)
    return root


def tiny_overrides(dataset_dir, out_dir, **extra):
    base = {
        "data.dir": str(dataset_dir),
        "data.points_per_cloud": 64,
        "data.count": 24,
        "data.n_train": 16,
        "data.n_test": 8,
        "grouping.groups": 8,
        "grouping.group_size": 8,
        "encoder.feature_dim": 24,
        "encoder.depth": 2,
        "encoder.pmla_positions": [1],
        "encoder.latent_dim": 8,
        "encoder.n_heads": 2,
        "encoder.state_dim": 4,
        "encoder.dt_rank": 2,
        "encoder.ffn_mult": 2,
        "diffusion.steps": 10,
        "optimizer.warmup_steps": 2,
        "steps": 3,
        "batch_size": 2,
        "checkpoint_every": 0,
        "out_dir": str(out_dir),
    }
    base.update(extra)
    return [f"{k}={json.dumps(v)}" for k, v in base.items()]


class TestConfig:
    def test_defaults_validate(self):
        train.load_config()

    def test_unknown_key_rejected(self):
        with pytest.raises(train.ConfigError, match="unknown config key"):
            train.load_config(base={"learning_rate": 0.1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(train.ConfigError, match="encoder"):
            train.load_config(base={"encoder": {"width": 5}})

    def test_bad_task_rejected(self):
        with pytest.raises(train.ConfigError, match="task"):
            train.load_config(base={"task": "dance"})

    def test_bad_override_path_rejected(self):
        with pytest.raises(train.ConfigError, match="unknown config key"):
            train.load_config(overrides=["encoder.bogus=3"])

    def test_override_types(self):
        cfg = train.load_config(overrides=["steps=7", "masking.ratio=0.25",
                                           "encoder.pmla_positions=[2]",
                                           "serialization.strategy=hilbert"])
        assert cfg.steps == 7 and cfg.masking.ratio == 0.25
        assert cfg.encoder.pmla_positions == [2]
        assert cfg.serialization.strategy == "hilbert"

    def test_config_file_roundtrip(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"steps": 9, "masking": {"ratio": 0.3}}))
        cfg = train.load_config(path)
        assert cfg.steps == 9 and cfg.masking.ratio == 0.3

    def test_mask_ratio_one_rejected(self):
        with pytest.raises(train.ConfigError, match="ratio"):
            train.load_config(overrides=["masking.ratio=1.0"])


class TestPretrainLoop:
    def test_one_step_checkpoint_roundtrips(self, dataset_dir, tmp_path):
        cfg = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "run", **{"steps": 1}))
        result = train.pretrain(cfg)
        ckpt = Path(result["checkpoint"])
        arrays = enc.load_checkpoint(ckpt)
        store = enc.ParamStore()
        enc.build_encoder(cfg.encoder.to_config(), cfg.seed, store=store)
        import pointseq.diffusion as diff
        ecfg = cfg.encoder.to_config()
        rng = np.random.default_rng(0)
        den = diff.init_denoiser(rng, ecfg.feature_dim, ecfg.c_inner, ecfg.state_dim,
                                 ecfg.conv_kernel, ecfg.rank_dt)
        store.register("denoiser", den)
        store.load_arrays(arrays)
        second = tmp_path / "again.ckpt"
        enc.save_checkpoint(second, store)
        assert ckpt.read_bytes() == second.read_bytes()

    def test_metric_traces_byte_identical(self, dataset_dir, tmp_path):
        a = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "a"))
        train.pretrain(a)
        b = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "b"))
        train.pretrain(b)
        assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
        assert (tmp_path / "a/checkpoint_final.ckpt").read_bytes() == \
            (tmp_path / "b/checkpoint_final.ckpt").read_bytes()

    def test_artifacts_written(self, dataset_dir, tmp_path):
        out = tmp_path / "run"
        cfg = train.load_config(overrides=tiny_overrides(dataset_dir, out))
        train.pretrain(cfg)
        for name in ("metrics.jsonl", "timings.jsonl", "summary.csv", "loss_curve.png",
                     "config.json", "checkpoint_final.ckpt"):
            assert (out / name).exists(), name
        assert (out / "loss_curve.png").stat().st_size > 0

    def test_degenerate_mode_is_plain_encode(self, dataset_dir, tmp_path):
        overrides = tiny_overrides(dataset_dir, tmp_path / "run",
                                   **{"masking.ratio": 0.0, "diffusion.steps": 1})
        cfg = train.load_config(overrides=overrides)
        prep = train.prepare_data(cfg)
        encoder, denoiser, _ = train.build_models(cfg)
        import pointseq.diffusion as diff
        schedule = diff.build_schedule(1, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
        indices = np.array([0, 1])
        loss, aux = train.pretrain_forward(cfg, encoder, denoiser, schedule, prep, indices, step=1)
        assert loss.item() == 0.0 and not loss.requires_grad
        direct, _ = train.encode_batch(cfg, encoder, prep, indices,
                                       seed=int(train._step_rng(cfg.seed, 1, 1).integers(2 ** 31)))
        np.testing.assert_array_equal(aux["cond"].data, direct.data)


class TestFinetuneLoop:
    def test_finetune_cls_runs_and_reports(self, dataset_dir, tmp_path):
        cfg = train.load_config(overrides=tiny_overrides(
            dataset_dir, tmp_path / "ft", task="finetune_cls"))
        result = train.finetune(cfg)
        assert 0.0 <= result["accuracy"] <= 1.0
        assert (tmp_path / "ft/result.json").exists()

    def test_finetune_seg_runs_and_reports(self, dataset_dir, tmp_path):
        cfg = train.load_config(overrides=tiny_overrides(
            dataset_dir, tmp_path / "ft", task="finetune_seg",
            **{"serialization.strategy": "axis"}))
        result = train.finetune(cfg)
        assert 0.0 <= result["instance_miou"] <= 1.0
        assert 0.0 <= result["class_miou"] <= 1.0

    def test_finetune_from_checkpoint(self, dataset_dir, tmp_path):
        pre = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "pre"))
        ck = train.pretrain(pre)["checkpoint"]
        cfg = train.load_config(overrides=tiny_overrides(
            dataset_dir, tmp_path / "ft", task="finetune_cls"))
        result = train.finetune(cfg, checkpoint=ck)
        assert "accuracy" in result

    def test_checkpoint_shape_mismatch_names_parameter(self, dataset_dir, tmp_path):
        pre = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "pre"))
        ck = train.pretrain(pre)["checkpoint"]
        cfg = train.load_config(overrides=tiny_overrides(
            dataset_dir, tmp_path / "ft", task="finetune_cls",
            **{"encoder.feature_dim": 32, "encoder.latent_dim": 8}))
        with pytest.raises(ValueError, match="backbone\\."):
            train.finetune(cfg, checkpoint=ck)


class TestMetrics:
    def test_perfect_predictor_miou_is_one(self):
        gt = np.array([[0, 0, 1, 1], [1, 1, 0, 0]])
        scores = train.miou_scores(gt.copy(), gt, n_parts=2)
        assert scores["instance_miou"] == 1.0
        assert scores["class_miou"] == 1.0

    def test_constant_predictor_on_two_equal_parts(self):
        # hand oracle: part0 IoU = 1/2 (pred everywhere, gt on half),
        # part1 IoU = 0, instance mean = 1/4, bounded by the 1/2 intersection
        gt = np.array([[0, 0, 1, 1]])
        pred = np.zeros_like(gt)
        scores = train.miou_scores(pred, gt, n_parts=2)
        assert scores["instance_miou"] == 0.25
        assert scores["instance_miou"] <= 0.5

    def test_absent_part_counts_as_one(self):
        gt = np.array([[0, 0, 0, 0]])
        pred = np.zeros_like(gt)
        scores = train.miou_scores(pred, gt, n_parts=2)
        assert scores["instance_miou"] == 1.0

    def test_class_miou_averages_shape_classes(self):
        gt = np.array([[0, 1], [0, 1], [0, 1]])
        pred = np.array([[0, 1], [0, 0], [0, 0]])
        labels = np.array([0, 1, 1])
        scores = train.miou_scores(pred, gt, n_parts=2, shape_labels=labels)
        # class 0 instances score 1.0; class 1 instances score (0.5 + 0)/2
        assert scores["class_miou"] == pytest.approx((1.0 + 0.25) / 2)

    def test_cross_entropy_matches_closed_form(self, rng):
        from pointseq.autodiff import Tensor
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 1])
        got = train.cross_entropy(Tensor(logits), labels).item()
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        want = -np.mean(np.log(p[np.arange(4), labels]))
        assert got == pytest.approx(want, rel=1e-12)


class TestAblate:
    def test_scanning_axis_emits_six_cells(self, dataset_dir, tmp_path):
        cfg = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "ab",
                                                         **{"steps": 2}))
        rows = train.ablate(cfg, "scanning")
        assert len(rows) == 6
        assert {r["cell"] for r in rows} == {
            "random/finetune_cls", "random/finetune_seg",
            "hilbert+trans/finetune_cls", "hilbert+trans/finetune_seg",
            "axis/finetune_cls", "axis/finetune_seg"}
        assert all(r["error"] == "" for r in rows)
        assert (tmp_path / "ab/ablation.csv").exists()
        assert (tmp_path / "ab/ablation.png").exists()

    def test_position_axis_maps_to_layers(self, dataset_dir, tmp_path):
        cfg = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "ab",
                                                         **{"steps": 2, "encoder.depth": 12,
                                                            "encoder.pmla_positions": [6]}))
        rows = train.ablate(cfg, "position")
        assert [r["cell"] for r in rows] == ["early", "middle", "late"]

    def test_latent_axis_values(self, dataset_dir, tmp_path):
        cfg = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "ab",
                                                         **{"steps": 2}))
        rows = train.ablate(cfg, "latent")
        assert [r["cell"] for r in rows] == ["32", "48", "64", "128"]

    def test_pmla_axis_and_partial_failure_recorded(self, dataset_dir, tmp_path):
        cfg = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "ab",
                                                         **{"steps": 2}))
        # force one cell to fail: heads cannot divide a prime feature width
        cfg.encoder.feature_dim = 24
        cfg.encoder.n_heads = 5
        rows = train.ablate(cfg, "pmla")
        assert [r["cell"] for r in rows] == ["mha", "none", "pmla"]
        assert any(r["error"] != "" for r in rows)
        # sweep still wrote its table
        assert (tmp_path / "ab/ablation.csv").exists()


class TestProbeCommand:
    def test_probe_writes_report(self, dataset_dir, tmp_path):
        cfg = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "probe"))
        rep = train.probe(cfg)
        saved = json.loads((tmp_path / "probe/probe.json").read_text())
        assert saved["channels"] == 24
        assert all(-1.0 <= c <= 1.0 for c in saved["per_channel_correlation"])
        assert (tmp_path / "probe/probe_correlation.png").exists()
        assert rep["channels"] == 24


class TestCLI:
    def run_cli(self, *argv):
        return cli.main(list(argv))

    def test_generate_and_pretrain_end_to_end(self, tmp_path, capsys):
        dd = tmp_path / "data"
        code = self.run_cli("generate", "--set", f"data.dir={json.dumps(str(dd))}",
                            "--set", "data.count=12", "--set", "data.points_per_cloud=64")
        assert code == 0
        overrides = tiny_overrides(dd, tmp_path / "run",
                                   **{"data.count": 12, "data.n_train": 8, "data.n_test": 4,
                                      "steps": 1})
        argv = ["pretrain"]
        for item in overrides:
            argv += ["--set", item]
        assert self.run_cli(*argv) == 0
        out = capsys.readouterr().out
        assert "final_loss" in out

    def test_config_error_exit_code(self):
        assert self.run_cli("pretrain", "--set", "bogus=1") == 2

    def test_missing_config_file_exit_code(self):
        assert self.run_cli("pretrain", "--config", "/nonexistent/config.json") == 2

    def test_bad_mask_mode_exit_code(self):
        assert self.run_cli("pretrain", "--set", "masking.mode=checkerboard") == 2

    def test_inspect_checkpoint(self, dataset_dir, tmp_path, capsys):
        cfg = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "run",
                                                         **{"steps": 1}))
        ck = train.pretrain(cfg)["checkpoint"]
        assert self.run_cli("inspect-checkpoint", ck) == 0
        out = capsys.readouterr().out
        assert "backbone.patch_embed.w1" in out and "entries" in out

    def test_console_script_installed(self):
        proc = subprocess.run([sys.executable, "-m", "pointseq.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "pretrain" in proc.stdout


class TestNumericFailure:
    def test_nan_abort_writes_dump_and_raises(self, dataset_dir, tmp_path):
        cfg = train.load_config(overrides=tiny_overrides(dataset_dir, tmp_path / "run",
                                                         **{"optimizer.lr": 1e9, "steps": 40}))
        with pytest.raises(train.NumericError, match="non-finite"):
            train.pretrain(cfg)
        assert (tmp_path / "run/nan_dump.json").exists()
