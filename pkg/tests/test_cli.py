"""End-to-end CLI behavior: exit codes, artifacts, determinism."""

import json
import os

import numpy as np
import pytest

from condcnn import cli
from condcnn import data as dp
from helpers import make_motif_dataset, stream_from_dataset


@pytest.fixture
def workspace(tmp_path):
    """A canonical CSV plus a small run config pointing at it."""
    ds = make_motif_dataset(n_per_class=25, t=32, seed=0)
    stream = stream_from_dataset(ds)
    csv_path = tmp_path / "synth.csv"
    dp.write_canonical(csv_path, stream)
    config = {
        "name": "synth-smoke",
        "dataset": {
            "name": "synth",
            "canonical_csv": "synth.csv",
            "window_len": 32,
            "step": 32,
            "classes": 4,
            "resample_to_hz": None,
            "normalization": "zscore",
            "split": {"kind": "random", "train_fraction": 0.7},
        },
        "model": {
            "shorthand": "C(4)-C(8)-FC-Sm",
            "convs_per_block": 1,
            "kernel_length": 5,
            "pool": [2, 2],
            "n_experts": 2,
            "condconv_mask": None,
            "head": "pointwise-condconv",
            "routing_activation": "sigmoid",
            "dropout_rate": 0.1,
        },
        "train": {
            "batch_size": 20,
            "epochs": 2,
            "lr_schedule": {"type": "step", "init": 0.001, "factor": 0.1, "every": 50},
        },
        "seed": 0,
        "output_dir": str(tmp_path / "run"),
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    return tmp_path, config_path


class TestConvert:
    def test_valid_file_exits_zero(self, tmp_path, capsys):
        raw = tmp_path / "raw.txt"
        raw.write_text("1,Walking,0,1.0,2.0,3.0;1,Jogging,1,2.0,3.0,4.0;")
        code = cli.main([
            "convert", "--dataset", "wisdm",
            "--in", str(raw), "--out", str(tmp_path / "c.csv"),
        ])
        assert code == 0
        assert "written: 2" in capsys.readouterr().out

    def test_missing_file_exits_two(self, tmp_path):
        code = cli.main([
            "convert", "--dataset", "wisdm",
            "--in", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "c.csv"),
        ])
        assert code == 2

    def test_bad_usage_exits_one(self):
        assert cli.main(["convert", "--dataset", "wisdm"]) == 1


class TestSegment:
    def test_window_count_matches_formula(self, workspace):
        tmp_path, config_path = workspace
        out = tmp_path / "seg"
        assert cli.main(["segment", "--config", str(config_path), "--out", str(out)]) == 0
        summary = json.loads((out / "segment-summary.json").read_text())
        assert summary["train_windows"] + summary["test_windows"] == 100

    def test_same_config_gives_identical_hashes(self, workspace):
        tmp_path, config_path = workspace
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cli.main(["segment", "--config", str(config_path), "--out", str(out_a)])
        cli.main(["segment", "--config", str(config_path), "--out", str(out_b)])
        sa = json.loads((out_a / "segment-summary.json").read_text())
        sb = json.loads((out_b / "segment-summary.json").read_text())
        assert sa["train_sha256"] == sb["train_sha256"]
        assert sa["test_sha256"] == sb["test_sha256"]
        assert (out_a / "train.ds").read_bytes() == (out_b / "train.ds").read_bytes()


class TestTrain:
    def test_smoke_run_produces_artifacts(self, workspace):
        tmp_path, config_path = workspace
        run = tmp_path / "run"
        assert cli.main(["train", "--config", str(config_path)]) == 0
        for name in ("config.json", "history.csv", "report.txt", "best.ckpt", "last.ckpt"):
            assert (run / name).exists(), name
        history = (run / "history.csv").read_text().strip().splitlines()
        assert history[0] == "epoch,lr,train_loss,test_acc"
        assert len(history) == 3  # header + 2 epochs
        assert not (run / ".lock").exists()

    def test_zero_epochs_exits_zero_with_empty_history(self, workspace):
        tmp_path, config_path = workspace
        run = tmp_path / "zero"
        code = cli.main([
            "train", "--config", str(config_path), "--epochs", "0", "--out", str(run),
        ])
        assert code == 0
        assert (run / "history.csv").read_text().strip() == "epoch,lr,train_loss,test_acc"

    def test_rerun_reproduces_history_bytes(self, workspace):
        tmp_path, config_path = workspace
        run_a, run_b = tmp_path / "ra", tmp_path / "rb"
        cli.main(["train", "--config", str(config_path), "--out", str(run_a)])
        cli.main(["train", "--config", str(config_path), "--out", str(run_b)])
        assert (run_a / "history.csv").read_bytes() == (run_b / "history.csv").read_bytes()
        assert (run_a / "best.ckpt").read_bytes() == (run_b / "best.ckpt").read_bytes()

    def test_expert_override_lands_in_echoed_config(self, workspace):
        tmp_path, config_path = workspace
        run = tmp_path / "override"
        cli.main([
            "train", "--config", str(config_path), "--out", str(run), "--experts", "4",
        ])
        echoed = json.loads((run / "config.json").read_text())
        assert echoed["model"]["n_experts"] == 4

    def test_lockfile_blocks_concurrent_runs(self, workspace):
        tmp_path, config_path = workspace
        run = tmp_path / "locked"
        os.makedirs(run, exist_ok=True)
        (run / ".lock").write_text("")
        code = cli.main(["train", "--config", str(config_path), "--out", str(run)])
        assert code == 1


class TestAnalyze:
    @pytest.fixture
    def trained(self, workspace):
        tmp_path, config_path = workspace
        run = tmp_path / "run"
        cli.main(["train", "--config", str(config_path)])
        return tmp_path, run

    def test_flops_report_needs_no_dataset(self, trained, capsys):
        tmp_path, run = trained
        out = tmp_path / "flops"
        code = cli.main([
            "analyze", "--checkpoint", str(run / "best.ckpt"),
            "--which", "flops", "--out", str(out),
        ])
        assert code == 0
        text = (out / "flops.csv").read_text()
        assert "layer,multiply_adds,flops,params" in text
        # the checkpointed model has 2 experts: report carries the ratio
        assert "flops ratio vs 1 expert" in (out / "flops.txt").read_text()

    def test_confusion_matches_history_accuracy(self, trained):
        tmp_path, run = trained
        out = tmp_path / "conf"
        code = cli.main([
            "analyze", "--checkpoint", str(run / "best.ckpt"),
            "--which", "confusion", "--dataset", str(run / "test.ds"),
            "--out", str(out),
        ])
        assert code == 0
        # best checkpoint accuracy equals the best row of the history
        history = (run / "history.csv").read_text().strip().splitlines()[1:]
        best_acc = max(float(line.split(",")[3]) for line in history)
        report = (out / "confusion.txt").read_text()
        assert f"accuracy: {best_acc:.4f}" in report

    def test_routing_reports_written(self, trained):
        tmp_path, run = trained
        out = tmp_path / "routing"
        code = cli.main([
            "analyze", "--checkpoint", str(run / "last.ckpt"),
            "--which", "routing", "--dataset", str(run / "test.ds"),
            "--out", str(out),
        ])
        assert code == 0
        assert (out / "routing-histogram.csv").exists()
        assert (out / "routing-class-means.csv").exists()

    def test_divergence_report(self, trained):
        tmp_path, run = trained
        out = tmp_path / "div"
        code = cli.main([
            "analyze", "--checkpoint", str(run / "last.ckpt"),
            "--which", "divergence", "--dataset", str(run / "test.ds"),
            "--out", str(out),
        ])
        assert code == 0
        lines = (out / "divergence.csv").read_text().strip().splitlines()
        assert lines[0] == "layer,divergence"
        assert len(lines) > 1

    def test_missing_dataset_flag_is_usage_error(self, trained):
        tmp_path, run = trained
        code = cli.main([
            "analyze", "--checkpoint", str(run / "best.ckpt"),
            "--which", "routing", "--out", str(tmp_path / "x"),
        ])
        assert code == 1

    def test_incompatible_dataset_is_data_error(self, trained, tmp_path):
        tmp_path_ws, run = trained
        other = make_motif_dataset(n_per_class=5, t=16, seed=1)
        bad = tmp_path_ws / "bad.ds"
        other.save(bad)
        code = cli.main([
            "analyze", "--checkpoint", str(run / "best.ckpt"),
            "--which", "confusion", "--dataset", str(bad),
            "--out", str(tmp_path_ws / "y"),
        ])
        assert code == 2


class TestBundledConfigs:
    def test_all_four_parse_and_build(self):
        import importlib.resources as resources

        from condcnn import archspec

        shapes = {
            "wisdm": (200, 3, 6),
            "pamap2": (512, 27, 12),
            "unimib": (151, 3, 17),
            "opportunity": (64, 113, 18),
        }
        for name, (t, c, classes) in shapes.items():
            text = resources.files("condcnn.configs").joinpath(f"{name}.json").read_text()
            config = json.loads(text)
            spec = archspec.spec_from_dict(config["model"])
            model = archspec.build_model(spec, (t, c), classes, seed=0)
            assert model.meta["n_classes"] == classes
            x = np.random.default_rng(0).normal(size=(2, t, c))
            assert model.eval().forward(x).data.shape == (2, classes)
