import csv
import json

import numpy as np
import pytest
from PIL import Image

from dtrattunet.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, OUTPUT_ROOT_ENV, build_run_config, main
from dtrattunet.data import make_synthetic_samples

TINY_MODEL_KEYS = """\
task: binary
model.image_size: 64
model.embed_dim: 96
model.depth: 4
model.heads: 4
model.mlp_dim: 192
model.tap_layers: [1, 2, 3, 4]
model.encoder_channels: [16, 32, 64, 128, 256]
"""


def write_config(path, corpus, out_dir, extra=""):
    path.write_text(
        TINY_MODEL_KEYS
        + f"""\
train.epochs: 2
train.base_lr: 0.001
train.decay_epochs: [1]
train.batch_size: 4
train.validation_fraction: 0.2
train.augment: false
data.root: {corpus}
data.train_fraction: 0.7
output.dir: {out_dir}
seeds: [0]
"""
        + extra
    )
    return path


@pytest.fixture
def trained_run(tmp_path, png_corpus):
    config = write_config(tmp_path / "run.yaml", png_corpus, tmp_path / "out")
    assert main(["train", "--config", str(config)]) == EXIT_OK
    return tmp_path / "out"


class TestRunConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(Exception, match="model.window_size"):
            build_run_config({"model.window_size": 7})

    def test_variant_key_sets_flags(self):
        rc = build_run_config({"model.variant": "unet"})
        assert not rc.model.use_attention_gates
        assert not rc.model.use_dual_decoder
        assert not rc.model.use_transformer_encoder

    def test_task_drives_class_count(self):
        rc = build_run_config({"task": "multiclass"})
        assert rc.model.num_infection_classes == 3
        assert rc.train.task == "multiclass"

    def test_seeds_and_runs_stay_consistent(self):
        rc = build_run_config({"seeds": [3, 4]})
        assert rc.train.runs == 2 and rc.train.seeds == (3, 4)
        rc = build_run_config({"train.runs": 3})
        assert rc.train.seeds == (0, 1, 2)

    def test_output_root_env_override(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "elsewhere"))
        rc = build_run_config({"output.dir": "runs/exp1"})
        assert rc.output_dir == tmp_path / "elsewhere" / "runs" / "exp1"


class TestTrainCommand:
    def test_dry_run_prints_manifest_and_writes_nothing(self, tmp_path, png_corpus, capsys):
        out_dir = tmp_path / "never"
        config = write_config(tmp_path / "c.yaml", png_corpus, out_dir)
        assert main(["train", "--config", str(config), "--dry-run"]) == EXIT_OK
        captured = capsys.readouterr().out
        assert "config-hash" in captured
        assert "TOTAL" in captured
        assert not out_dir.exists()

    def test_variant_override_builds_baseline(self, tmp_path, png_corpus, capsys):
        config = write_config(tmp_path / "c.yaml", png_corpus, tmp_path / "never")
        assert main(["train", "--config", str(config), "--dry-run", "--variant", "unet"]) == EXIT_OK
        captured = capsys.readouterr().out
        assert "variant unet" in captured
        assert "transformer" not in captured

    def test_missing_dataset_root_exits_2_with_path(self, tmp_path, capsys):
        config = write_config(tmp_path / "c.yaml", "/no/such/corpus", tmp_path / "out")
        assert main(["train", "--config", str(config)]) == EXIT_CONFIG
        assert "/no/such/corpus" in capsys.readouterr().err

    def test_unknown_key_exits_2(self, tmp_path, png_corpus, capsys):
        config = write_config(tmp_path / "c.yaml", png_corpus, tmp_path / "out", extra="turbo: yes\n")
        assert main(["train", "--config", str(config)]) == EXIT_CONFIG
        assert "turbo" in capsys.readouterr().err

    def test_training_produces_run_artifacts(self, trained_run):
        assert (trained_run / "run_manifest.json").is_file()
        assert (trained_run / "run-0" / "best.ckpt").is_file()
        assert (trained_run / "run-0" / "last.ckpt").is_file()
        assert (trained_run / "run-0" / "log.jsonl").is_file()
        assert (trained_run / "report.csv").is_file()
        manifest = json.loads((trained_run / "run_manifest.json").read_text())
        assert manifest["variant"] == "d-trattunet"
        assert len(manifest["config_hash"]) == 64

    def test_multiple_seeds_make_multiple_run_dirs(self, tmp_path, png_corpus):
        config = write_config(tmp_path / "c.yaml", png_corpus, tmp_path / "multi")
        assert (
            main(
                [
                    "train",
                    "--config",
                    str(config),
                    "--seeds",
                    "0,1,2",
                    "--set",
                    "train.epochs=1",
                    "--set",
                    "train.decay_epochs=[]",
                ]
            )
            == EXIT_OK
        )
        for seed in (0, 1, 2):
            assert (tmp_path / "multi" / f"run-{seed}" / "best.ckpt").is_file()
        with open(tmp_path / "multi" / "report.csv") as fh:
            row = next(csv.DictReader(fh))
        assert row["runs"] == "3"
        assert "±" in row["f1"]


class TestEvaluateCommand:
    def test_reports_written(self, trained_run, png_corpus, tmp_path):
        out = tmp_path / "eval"
        code = main(
            [
                "evaluate",
                "--checkpoint",
                str(trained_run / "run-0" / "best.ckpt"),
                "--data",
                str(png_corpus),
                "--split",
                "test",
                "--per-image",
                "--out",
                str(out),
            ]
        )
        assert code == EXIT_OK
        with open(out / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["class"] == "infection"
        per_image = (out / "per_image.csv").read_text().splitlines()
        assert per_image[0] == "source_id,class,dice"
        assert len(per_image) > 1

    def test_task_mismatch_refused(self, trained_run, png_corpus, tmp_path, capsys):
        code = main(
            [
                "evaluate",
                "--checkpoint",
                str(trained_run / "run-0" / "best.ckpt"),
                "--data",
                str(png_corpus),
                "--task",
                "multiclass",
                "--out",
                str(tmp_path / "e2"),
            ]
        )
        assert code == EXIT_CONFIG
        assert "binary" in capsys.readouterr().err


class TestPredictAndOverlay:
    def test_predict_writes_label_maps(self, trained_run, png_corpus, tmp_path):
        outdir = tmp_path / "pred"
        code = main(
            [
                "predict",
                "--checkpoint",
                str(trained_run / "run-0" / "best.ckpt"),
                "--outdir",
                str(outdir),
                str(png_corpus / "images" / "synthetic-000.png"),
            ]
        )
        assert code == EXIT_OK
        mask = np.asarray(Image.open(outdir / "synthetic-000_mask.png"))
        assert mask.shape == (64, 64)
        assert set(np.unique(mask).tolist()) <= {0, 1}

    def test_predict_is_deterministic_across_reruns(self, trained_run, png_corpus, tmp_path):
        args = [
            "predict",
            "--checkpoint",
            str(trained_run / "run-0" / "best.ckpt"),
            str(png_corpus / "images" / "synthetic-001.png"),
        ]
        first, second = tmp_path / "p1", tmp_path / "p2"
        assert main(args[:3] + ["--outdir", str(first)] + args[3:]) == EXIT_OK
        assert main(args[:3] + ["--outdir", str(second)] + args[3:]) == EXIT_OK
        a = (first / "synthetic-001_mask.png").read_bytes()
        b = (second / "synthetic-001_mask.png").read_bytes()
        assert a == b

    def test_overlay_writes_rgb(self, trained_run, png_corpus, tmp_path):
        outdir = tmp_path / "ovl"
        code = main(
            [
                "overlay",
                "--checkpoint",
                str(trained_run / "run-0" / "best.ckpt"),
                "--outdir",
                str(outdir),
                "--lung-contour",
                str(png_corpus / "images"),
            ]
        )
        assert code == EXIT_OK
        files = sorted(outdir.glob("*_overlay.png"))
        assert len(files) == 8
        assert np.asarray(Image.open(files[0])).shape == (64, 64, 3)

    def test_unreadable_inputs_are_skipped(self, trained_run, tmp_path, capsys):
        good_dir = tmp_path / "inputs"
        good_dir.mkdir()
        bad = good_dir / "broken.png"
        bad.write_text("not an image")
        samples = make_synthetic_samples(1, seed=9)
        arr = np.clip(samples[0].image * 255, 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(good_dir / "fine.png")
        code = main(
            [
                "predict",
                "--checkpoint",
                str(trained_run / "run-0" / "best.ckpt"),
                "--outdir",
                str(tmp_path / "mixed"),
                str(good_dir),
            ]
        )
        assert code == EXIT_OK
        assert "broken.png" in capsys.readouterr().err
        assert (tmp_path / "mixed" / "fine_mask.png").is_file()

    def test_all_unreadable_is_runtime_failure(self, trained_run, tmp_path):
        bad = tmp_path / "only-bad"
        bad.mkdir()
        (bad / "x.png").write_text("nope")
        code = main(
            [
                "predict",
                "--checkpoint",
                str(trained_run / "run-0" / "best.ckpt"),
                "--outdir",
                str(tmp_path / "none"),
                str(bad),
            ]
        )
        assert code == EXIT_RUNTIME


class TestSummarize:
    def test_variant_manifest_to_stdout(self, capsys):
        code = main(
            [
                "summarize",
                "--variant",
                "unet",
                "--set",
                "model.image_size=64",
                "--set",
                "model.embed_dim=96",
                "--set",
                "model.depth=4",
                "--set",
                "model.heads=4",
                "--set",
                "model.mlp_dim=192",
                "--set",
                "model.tap_layers=[1,2,3,4]",
                "--set",
                "model.encoder_channels=[16,32,64,128,256]",
            ]
        )
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "config-hash" in out and "variant unet" in out and "TOTAL" in out

    def test_checkpoint_manifest_json(self, trained_run, tmp_path):
        target = tmp_path / "manifest.json"
        code = main(
            [
                "summarize",
                "--checkpoint",
                str(trained_run / "run-0" / "best.ckpt"),
                "--json",
                "--out",
                str(target),
            ]
        )
        assert code == EXIT_OK
        entries = json.loads(target.read_text())
        assert entries[-1]["name"] == "TOTAL"
