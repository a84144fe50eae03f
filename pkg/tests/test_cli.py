import json
import os
import shutil

import numpy as np
import pytest

from bmdsr import fileio
from bmdsr.checkpoint import load_model
from bmdsr.cli import build_parser, main
from bmdsr.data_pipeline import load_manifest, synthesize_blur


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    spec = root / "suite.json"
    spec.write_text(json.dumps({"n_sequences": 3, "n_frames": 14, "height": 64, "width": 64}))
    assert main(["synth", "--toy-spec", str(spec), "--scale", "2", "--out", str(root / "ds"),
                 "--seed", "3"]) == 0
    return root / "ds"


def _train(dataset, out, variant, steps=3, seed=0):
    return main(["train", "--manifest", str(dataset), "--out", str(out), "--desk",
                 "--variant", variant, "--steps", str(steps), "--batch-size", "2",
                 "--multiplier", "0.125", "--seed", str(seed)])


@pytest.fixture(scope="module")
def c_checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_c")
    assert _train(dataset, out, "C", steps=30) == 0
    return out / "last.pt"


class TestSynth:
    def test_default_toy(self, tmp_path, capsys):
        assert main(["synth", "--toy-spec", "default", "--scale", "4", "--out", str(tmp_path)]) == 0
        assert len(load_manifest(tmp_path).samples) > 0
        assert "samples" in capsys.readouterr().out

    def test_missing_out(self, capsys):
        assert main(["synth", "--toy-spec", "default", "--scale", "4"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_source(self, tmp_path):
        assert main(["synth", "--scale", "2", "--out", str(tmp_path)]) == 1

    def test_rerun_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert main(["synth", "--toy-spec", "default", "--scale", "3", "--seed", "11",
                         "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a" / "manifest.json").read_bytes() == \
            (tmp_path / "b" / "manifest.json").read_bytes()
        m = load_manifest(tmp_path / "a")
        rec = m.samples[0]
        assert (tmp_path / "a" / rec.blur_lr).read_bytes() == (tmp_path / "b" / rec.blur_lr).read_bytes()

    def test_bad_source_is_data_error(self, tmp_path):
        assert main(["synth", "--source", str(tmp_path / "nope"), "--scale", "2",
                     "--out", str(tmp_path / "o")]) == 2

    def test_atomic_manifest(self, tmp_path, monkeypatch):
        real = os.replace

        def crash(src, dst):
            if str(dst).endswith("manifest.json"):
                raise KeyboardInterrupt
            return real(src, dst)

        monkeypatch.setattr(os, "replace", crash)
        with pytest.raises(KeyboardInterrupt):
            main(["synth", "--toy-spec", "default", "--scale", "4", "--out", str(tmp_path)])
        assert not (tmp_path / "manifest.json").exists()
        assert not list(tmp_path.glob(".manifest.json.*"))


class TestTrain:
    def test_same_flags_same_weights(self, dataset, tmp_path):
        assert _train(dataset, tmp_path / "a", "FC", steps=3, seed=4) == 0
        assert _train(dataset, tmp_path / "b", "FC", steps=3, seed=4) == 0
        a = load_model(tmp_path / "a" / "last.pt").state_dict()
        b = load_model(tmp_path / "b" / "last.pt").state_dict()
        assert all((a[k] - b[k]).abs().max() <= 1e-6 for k in a)

    def test_config_file_and_flag_precedence(self, dataset, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("variant: SRNET\nmax_steps: 5\nchannel_multiplier: 0.125\npatch: 16\n")
        assert main(["train", "--manifest", str(dataset), "--out", str(tmp_path / "r"),
                     "--config", str(cfg), "--steps", "2"]) == 0
        lines = (tmp_path / "r" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2

    def test_bad_config_usage(self, dataset, tmp_path):
        assert main(["train", "--manifest", str(dataset), "--out", str(tmp_path),
                     "--patch", "100", "--scale", "2"]) == 1

    def test_missing_manifest(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


class TestDecompose:
    def test_writes_frames_and_grid(self, c_checkpoint, dataset, tmp_path):
        m = load_manifest(dataset)
        blur = dataset / m.samples[0].blur_lr
        assert main(["decompose", "--checkpoint", str(c_checkpoint), "--input", str(blur),
                     "--out", str(tmp_path)]) == 0
        names = sorted(p.name for p in tmp_path.glob("*.png"))
        assert names == ["grid.png"] + [f"sharp_{i}.png" for i in range(1, 8)]
        grid = fileio.read_image(tmp_path / "grid.png")
        lr = fileio.read_image(blur)
        assert grid.shape == (lr.shape[0], 7 * lr.shape[1] + 6 * 2, 3)

    def test_srnet_rejected(self, dataset, tmp_path):
        assert _train(dataset, tmp_path / "s", "SRNET", steps=1) == 0
        m = load_manifest(dataset)
        assert main(["decompose", "--checkpoint", str(tmp_path / "s" / "last.pt"),
                     "--input", str(dataset / m.samples[0].blur_lr), "--out", str(tmp_path / "o")]) == 2

    def test_reblur_consistency(self, c_checkpoint, tmp_path, capsys):
        img = np.random.default_rng(0).uniform(0.2, 0.8, size=(32, 32, 3))
        blur = synthesize_blur([img] * 7)
        fileio.write_png(tmp_path / "blur.png", blur)
        assert main(["decompose", "--checkpoint", str(c_checkpoint), "--input",
                     str(tmp_path / "blur.png"), "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "decompose_report.json").read_text())
        assert rep["reblur_l1"] <= rep["mean_frame_l1"] + 1e-12
        assert "re-blur L1" in capsys.readouterr().out


class TestInferEval:
    def test_infer_dims(self, c_checkpoint, tmp_path):
        img = np.random.default_rng(1).uniform(size=(20, 28, 3))
        fileio.write_png(tmp_path / "in.png", img)
        assert main(["infer", "--checkpoint", str(c_checkpoint), "--input", str(tmp_path / "in.png"),
                     "--out", str(tmp_path / "out.png")]) == 0
        assert fileio.read_image(tmp_path / "out.png").shape == (40, 56, 3)

    def test_eval_identity_fixture(self, dataset, tmp_path):
        m = load_manifest(dataset)
        preds = tmp_path / "preds"
        preds.mkdir()
        for rec in m.subset("test"):
            shutil.copy(dataset / rec.sharp_hr, preds / f"{rec.sample_id}.png")
        out = tmp_path / "report.json"
        assert main(["eval", "--manifest", str(dataset), "--pred-dir", str(preds),
                     "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["aggregate"]["mean_psnr"] == 100.0
        assert rep["aggregate"]["mean_ssim"] == 1.0

    def test_eval_checkpoint_aggregate(self, dataset, c_checkpoint, tmp_path):
        out = tmp_path / "report.json"
        assert main(["eval", "--manifest", str(dataset), "--checkpoint", str(c_checkpoint),
                     "--out", str(out), "--grid", str(tmp_path / "grid.png")]) == 0
        rep = json.loads(out.read_text())
        per = rep["per_sample"]
        assert set(per[0]) == {"id", "psnr", "ssim"}
        agg = rep["aggregate"]
        assert abs(agg["mean_psnr"] - np.mean([p["psnr"] for p in per])) <= 1e-9
        assert abs(agg["mean_ssim"] - np.mean([p["ssim"] for p in per])) <= 1e-9
        assert agg["n"] == len(per) and agg["variant"] == "C" and agg["scale"] == 2
        assert len(agg["checkpoint_hash"]) == 64
        assert (tmp_path / "grid.png").exists()

    def test_eval_needs_one_source(self, dataset, tmp_path):
        assert main(["eval", "--manifest", str(dataset), "--out", str(tmp_path / "r.json")]) == 1

    def test_eval_missing_prediction(self, dataset, tmp_path):
        assert main(["eval", "--manifest", str(dataset), "--pred-dir", str(tmp_path),
                     "--out", str(tmp_path / "r.json")]) == 2


def test_help_lists_flags(capsys):
    parser = build_parser()
    for cmd, flags in {"synth": ["--source", "--toy-spec", "--scale", "--stride", "--out", "--seed"],
                       "train": ["--manifest", "--config", "--variant", "--steps", "--resume", "--seed"],
                       "decompose": ["--checkpoint", "--input", "--out"],
                       "eval": ["--pred-dir", "--grid", "--split"],
                       "infer": ["--checkpoint", "--input", "--out"]}.items():
        assert main([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        for f in flags:
            assert f in text, (cmd, f)


def test_ablate_command(dataset, tmp_path, capsys):
    assert main(["ablate", "--data", f"2={dataset}", "--out", str(tmp_path), "--steps", "1",
                 "--variants", "SRNET", "C"]) == 0
    assert "SRNet" in capsys.readouterr().out
