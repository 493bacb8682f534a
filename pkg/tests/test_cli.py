import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from cdrn.pipeline import load_checkpoint
from cdrn.pipeline.cli import main


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "tiny.json"
    path.write_text(tiny_config.to_json())
    return str(path)


@pytest.fixture
def trained(tmp_path, config_file):
    out = tmp_path / "run"
    assert main(["train", "--stage", "all", "--config", config_file, "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_manifest_is_reproducible(self, tmp_path, config_file):
        for name in ("a", "b"):
            assert main(["synth", "--config", config_file, "--count", "3", "--test", "1", "--out", str(tmp_path / name)]) == 0
        for f in ("manifest.json", "run_manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert len(manifest["pairs"]) == 3

    def test_images_need_labels(self, tmp_path, capsys):
        assert main(["synth", "--images", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
        assert "--labels" in capsys.readouterr().err


class TestTrain:
    def test_stage_two_without_checkpoint(self, tmp_path, config_file, capsys):
        code = main(["train", "--stage", "2", "--config", config_file, "--out", str(tmp_path / "r")])
        assert code == 1
        assert "stage 2 needs" in capsys.readouterr().err

    def test_writes_checkpoints_and_log(self, trained):
        for s in (1, 2, 3):
            assert load_checkpoint(trained / f"stage{s}.ckpt").meta["stages_completed"] == list(range(1, s + 1))
        lines = (trained / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(l)["stage"] for l in lines] == [1, 1, 2, 2, 3, 3]

    def test_stage_by_stage_matches_all(self, tmp_path, config_file, trained):
        out = tmp_path / "steps"
        for s in ("1", "2", "3"):
            assert main(["train", "--stage", s, "--config", config_file, "--out", str(out)]) == 0
        assert (out / "stage3.ckpt").read_bytes() == (trained / "stage3.ckpt").read_bytes()


class TestParser:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["fly"])
        assert exc.value.code == 2

    def test_missing_checkpoint_file(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 1

    def test_module_entry(self):
        proc = subprocess.run([sys.executable, "-m", "cdrn.pipeline.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gradcheck" in proc.stdout


class TestEvalInfer:
    def test_eval_report(self, trained, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(trained / "stage3.ckpt"), "--out", str(out)]) == 0
        md = (out / "report.md").read_text()
        header = next(l for l in md.splitlines() if l.startswith("| model"))
        assert [c.strip() for c in header.strip("|").split("|")] == ["model", "PSNR", "SSIM", "mAP", "mAR"]
        rows = list(csv.DictReader((out / "report.csv").open()))
        assert [r["model"] for r in rows] == ["rainy input", "derained", "clean reference"]
        assert all(0.0 <= float(r["mAP"]) <= 1.0 for r in rows)
        assert (out / "metrics.jsonl").read_text().strip()
        assert header in capsys.readouterr().out

    def test_infer_outputs(self, trained, tmp_path):
        img = (np.random.default_rng(0).random((50, 70, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / "in.png")
        out = tmp_path / "inf"
        assert main(["infer", "--checkpoint", str(trained / "stage3.ckpt"), "--image", str(tmp_path / "in.png"),
                     "--out", str(out)]) == 0
        derained = np.asarray(Image.open(out / "in_derained.png"))
        assert derained.shape == (50, 70, 3)
        payload = json.loads((out / "in_detections.json").read_text())
        assert payload["size"] == [70, 50]
        for d in payload["detections"]:
            x1, y1, x2, y2 = d["box"]
            assert 0 <= x1 < x2 <= 70 and 0 <= y1 < y2 <= 50
        assert (out / "in_overlay.png").exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1", "--cases", "conv2d", "relu"]) == 0
    assert "PASSED" in capsys.readouterr().out
