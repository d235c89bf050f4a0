"""Configuration machinery and CLI end-to-end tests (tiny scales)."""

import json
from pathlib import Path

import numpy as np
import pytest

from jointalign.align_net import AlignNet
from jointalign.cli import main
from jointalign.config import ConfigError, RunConfig


class TestRunConfig:
    def test_defaults_follow_paper_scale(self):
        cfg = RunConfig.build()
        assert cfg.input.n_bbox == 2000 and cfg.input.n_cad == 500
        assert cfg.net.n_latent == 80 and cfg.net.c_latent == 256
        assert cfg.net.n_mul == 5 and cfg.train.n_loss == 1000
        assert cfg.train.batch_images == 20 and cfg.train.lr == 0.001

    def test_desk_preset(self):
        cfg = RunConfig.build(preset="desk")
        assert cfg.scene.image_width == 128 and cfg.scene.image_height == 96
        assert cfg.input.n_bbox == 200 and cfg.input.n_cad == 100
        assert cfg.net.n_mul == 3 and cfg.net.n_latent == 32
        assert cfg.net.c_latent == 64 and cfg.train.n_loss == 256
        assert cfg.provenance["net.n_latent"] == "preset:desk"

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.build(set_flags=["net.bogus_knob=3"])
        with pytest.raises(ConfigError):
            RunConfig.build(set_flags=["nosection.lr=3"])

    def test_set_flag_overrides(self):
        cfg = RunConfig.build(set_flags=["train.lr=0.01", "net.heads=2"])
        assert cfg.train.lr == 0.01
        assert cfg.net.heads == 2
        assert cfg.provenance["train.lr"] == "flag"

    def test_env_overrides(self):
        cfg = RunConfig.build(environ={"JOINTALIGN_TRAIN__LR": "0.005",
                                       "JOINTALIGN_SEED": "9"})
        assert cfg.train.lr == 0.005
        assert cfg.seed == 9
        assert cfg.provenance["train.lr"] == "env"

    def test_file_overrides(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"scene": {"count_range": [2, 2]},
                                    "eval": {"thresholds": {"t_max": 0.1}}}))
        cfg = RunConfig.build(config_path=path)
        assert cfg.scene.count_range == (2, 2)
        assert cfg.eval.thresholds.t_max == 0.1
        assert cfg.provenance["scene.count_range"] == "file"

    def test_hash_changes_iff_leaf_changes(self):
        a = RunConfig.build()
        b = RunConfig.build()
        assert a.config_hash() == b.config_hash()
        c = RunConfig.build(set_flags=["train.lr=0.002"])
        assert c.config_hash() != a.config_hash()

    def test_mul_consistency_enforced(self):
        with pytest.raises(ConfigError):
            RunConfig.build(set_flags=["net.n_mul=3"])  # input stays 5

    def test_invalid_value_rejected(self):
        with pytest.raises((ConfigError, ValueError)):
            RunConfig.build(set_flags=["train.lr=-1"])


TINY = [
    "--preset", "desk",
    "--set", "scene.model_samples=128",
    "--set", "scene.count_range=[1,2]",
    "--set", "input.n_bbox=30", "--set", "input.n_cad=20",
    "--set", "input.n_mul=3",
    "--set", "net.n_latent=4", "--set", "net.c_latent=16",
    "--set", "train.n_loss=32", "--set", "train.batch_images=2",
]


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rc = main(["gen-data", "--out", str(out), "--count", "4", "--seed", "3",
               *TINY])
    assert rc == 0
    return out


class TestGenData:
    def test_files_written(self, tiny_dataset):
        assert len(list((tiny_dataset / "scenes").glob("*.json"))) == 4
        assert len(list((tiny_dataset / "channels").glob("*.bin"))) == 4
        manifest = json.loads((tiny_dataset / "manifest.json").read_text())
        assert manifest["count"] == 4
        assert len(manifest["config_hash"]) == 64

    def test_rerun_identical_manifest(self, tiny_dataset, tmp_path):
        out2 = tmp_path / "again"
        assert main(["gen-data", "--out", str(out2), "--count", "4",
                     "--seed", "3", *TINY]) == 0
        assert ((tiny_dataset / "manifest.json").read_bytes()
                == (out2 / "manifest.json").read_bytes())
        a = (tiny_dataset / "channels" / "00001.bin").read_bytes()
        b = (out2 / "channels" / "00001.bin").read_bytes()
        assert a == b

    def test_empty_dataset_manifest_only(self, tmp_path):
        out = tmp_path / "empty"
        assert main(["gen-data", "--out", str(out), "--count", "0",
                     *TINY]) == 0
        assert (out / "manifest.json").exists()
        assert list((out / "scenes").glob("*")) == []


class TestTrain:
    def test_one_epoch_writes_loadable_checkpoint(self, tiny_dataset, tmp_path):
        ckpt = tmp_path / "net.ckpt"
        rc = main(["train", "--data", str(tiny_dataset), "--out", str(ckpt),
                   "--epochs", "1", "--seed", "3", *TINY])
        assert rc == 0
        net, state = AlignNet.load(ckpt)
        assert state is not None and state.step > 0
        log = ckpt.with_suffix(".log.csv")
        header = log.read_text().splitlines()[0].split(",")
        assert "l_align" in header and "l_cls" in header

    def test_resume_continues_steps(self, tiny_dataset, tmp_path):
        ckpt = tmp_path / "net.ckpt"
        main(["train", "--data", str(tiny_dataset), "--out", str(ckpt),
              "--epochs", "1", "--seed", "3", *TINY])
        _, state1 = AlignNet.load(ckpt)
        main(["train", "--data", str(tiny_dataset), "--out", str(ckpt),
              "--epochs", "1", "--seed", "3", "--resume", str(ckpt), *TINY])
        _, state2 = AlignNet.load(ckpt)
        assert state2.step == 2 * state1.step

    def test_stream_mode(self, tmp_path):
        ckpt = tmp_path / "stream.ckpt"
        rc = main(["train", "--stream", "--scenes", "3", "--out", str(ckpt),
                   "--epochs", "1", "--seed", "3", *TINY])
        assert rc == 0
        assert ckpt.exists()


class TestEvalRefine:
    def test_oracle_eval_perfect_on_clean_data(self, tiny_dataset, tmp_path):
        out = tmp_path / "report"
        rc = main(["eval", "--data", str(tiny_dataset), "--out", str(out),
                   "--oracle", "--seed", "3", *TINY,
                   "--set", "noise.depth_sigma=0",
                   "--set", "noise.normal_jitter_deg=0",
                   "--set", "detect.bbox_jitter_frac=0"])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["per_image"]["instance_accuracy"] == 1.0
        assert report["per_scene"]["instance_accuracy"] == 1.0
        assert report["ap_mesh"]["ap50"] == 1.0
        # Table-1-shaped block: per-category rows + instance summary
        assert report["per_scene"]["per_category"]
        for rec in report["per_scene"]["per_category"].values():
            assert {"correct", "total", "accuracy"} <= set(rec)
        assert (out / "per_category.csv").exists()

    def test_identity_eval_runs(self, tiny_dataset, tmp_path):
        out = tmp_path / "report_id"
        rc = main(["eval", "--data", str(tiny_dataset), "--out", str(out),
                   "--identity-predictor", "--seed", "3", *TINY])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        acc = report["accuracy_by_iteration"]
        assert len(acc) == 4
        assert all(a == acc[0] for a in acc)  # identity updates do nothing

    def test_refine_jsonl(self, tiny_dataset, tmp_path):
        out = tmp_path / "preds.jsonl"
        traces = tmp_path / "traces.jsonl"
        rc = main(["refine", "--data", str(tiny_dataset), "--out", str(out),
                   "--oracle", "--seed", "3", "--dump-traces", str(traces),
                   *TINY])
        assert rc == 0
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert lines
        assert set(lines[0]) == {"scene", "detection", "category", "model_id",
                                 "pose", "sigma", "detector_confidence"}
        trace_rec = json.loads(traces.read_text().splitlines()[0])
        assert trace_rec["forward_passes"] > 0

    def test_missing_checkpoint_fails(self, tiny_dataset, tmp_path):
        rc = main(["eval", "--data", str(tiny_dataset),
                   "--out", str(tmp_path / "r"), "--seed", "3", *TINY])
        assert rc != 0


@pytest.fixture(scope="module")
def report_dir(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("rep")
    main(["eval", "--data", str(tiny_dataset), "--out", str(out),
          "--oracle", "--seed", "3", *TINY])
    return out


class TestCalibPlots:
    def test_calibration_outputs(self, report_dir):
        rc = main(["calib", "--report", str(report_dir)])
        assert rc == 0
        lines = (report_dir / "calibration_bins.csv").read_text().splitlines()
        report = json.loads((report_dir / "report.json").read_text())
        assert len(lines) - 1 == len(report["calibration"]["bins"])
        assert (report_dir / "calibration.png").exists()

    def test_plots_outputs(self, report_dir):
        rc = main(["plots", "--report", str(report_dir)])
        assert rc == 0
        rows = (report_dir / "accuracy_by_iteration.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["0", "1", "2", "3"]
        assert (report_dir / "accuracy_by_iteration.png").exists()
        assert (report_dir / "per_image_categories.png").exists()

    def test_plots_deterministic_csv(self, report_dir, tmp_path):
        out1, out2 = tmp_path / "p1", tmp_path / "p2"
        main(["plots", "--report", str(report_dir), "--out", str(out1)])
        main(["plots", "--report", str(report_dir), "--out", str(out2)])
        assert ((out1 / "accuracy_by_iteration.csv").read_bytes()
                == (out2 / "accuracy_by_iteration.csv").read_bytes())
