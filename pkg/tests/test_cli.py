import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from cuelight import cli, io
from cuelight.curves import build_enhancer, enhance, save_enhancer
from cuelight.image import quantize, read_image, write_image
from cuelight.train import TERMS

from conftest import enumerated_ap, read_json, three_box_detections


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture
def image_dir(tmp_path, rng):
    d = tmp_path / "inputs"
    for k in range(3):
        write_image(d / f"im{k}.png", rng.random((40, 48, 3)) * 0.3)
    return d


class TestLearnPrior:
    def test_contract(self, fixture_dir, tmp_path):
        out = tmp_path / "p1"
        assert run("learn-prior", "--config", fixture_dir / "config.toml", "--out", out) == 0
        for name in ("prompts.bin", "prompts.json", "trace.csv", "manifest.json", "summary.json"):
            assert (out / name).exists(), name
        manifest = read_json(out / "manifest.json")
        assert manifest["command"] == "learn-prior" and manifest["seed"] == 3
        assert manifest["config"]["prior"]["epochs"] == 2
        assert read_json(out / "summary.json")["status"] == "ok"
        assert [r[0] for r in read_csv(out / "trace.csv")] == ["epoch", "1", "2"]

    def test_missing_dataset_path(self, tmp_path, capsys):
        assert run("learn-prior", "--out", tmp_path / "p") == 2
        assert "data.images_dir" in capsys.readouterr().err
        summary = read_json(tmp_path / "p" / "summary.json")
        assert summary["status"] == "config-error" and "data.images_dir" in summary["error"]

    def test_seeded_checksum(self, fixture_dir, tmp_path):
        digests = []
        for name in ("a", "b"):
            args = ["learn-prior", "--config", fixture_dir / "config.toml", "--mock-backend", "--seed", 7]
            assert run(*args, "--out", tmp_path / name) == 0
            digests.append(io.sha256(tmp_path / name / "prompts.bin"))
        assert digests[0] == digests[1]
        assert read_json(tmp_path / "a" / "manifest.json")["seed"] == 7

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[prior]\nepoch = 2\n")
        assert run("learn-prior", "--config", cfg, "--out", tmp_path / "p") == 2
        assert "prior.epoch" in capsys.readouterr().err


class TestTrain:
    def test_one_epoch(self, fixture_dir, tmp_path):
        out = tmp_path / "t"
        assert run("train", "--config", fixture_dir / "config.toml", "--epochs", 1, "--out", out) == 0
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["epoch_0001.bin", "epoch_0001.json"]
        for name in ("config.json", "trace.csv", "weights.bin", "weights.json", "manifest.json"):
            assert (out / name).exists(), name
        rows = read_csv(out / "trace.csv")
        assert rows[0] == ["step", "epoch", *TERMS]
        assert len(rows) == 1 + 4  # 32 patches in batches of 8
        for row in rows[1:]:
            values = dict(zip(rows[0], row))
            assert values["prior"] == values["content"] == values["context"] == "0.0"
            assert values["total"] == values["zero_reference"]

    def test_resume_matches(self, fixture_dir, tmp_path):
        cfg = fixture_dir / "config.toml"
        assert run("train", "--config", cfg, "--epochs", 2, "--out", tmp_path / "full") == 0
        ckpt = tmp_path / "full" / "checkpoints" / "epoch_0001"
        assert run("train", "--config", cfg, "--epochs", 2, "--resume", ckpt, "--out", tmp_path / "resumed") == 0
        for name in ("trace.csv", "weights.bin"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes()

    def test_full_objective(self, fixture_dir, tmp_path):
        cfg = fixture_dir / "config.toml"
        assert run("learn-prior", "--config", cfg, "--out", tmp_path / "p") == 0
        assert run("fine-tune-heads", "--config", cfg, "--out", tmp_path / "h") == 0
        assert io.exists(tmp_path / "h" / "heads" / "content") and io.exists(tmp_path / "h" / "heads" / "context")
        args = ["train", "--config", cfg, "--prompts", tmp_path / "p" / "prompts", "--heads", tmp_path / "h" / "heads",
                "--lambda-prior", 1, "--lambda-content", 1, "--lambda-context", 1, "--out", tmp_path / "t"]
        assert run(*args) == 0
        rows = read_csv(tmp_path / "t" / "trace.csv")
        prior = [float(dict(zip(rows[0], r))["prior"]) for r in rows[1:]]
        assert all(v > 0 for v in prior)
        summary = read_json(tmp_path / "t" / "summary.json")
        assert summary["prompts_sha256"] == io.sha256(tmp_path / "p" / "prompts.bin")

    def test_prior_without_prompts(self, fixture_dir, tmp_path, capsys):
        assert run("train", "--config", fixture_dir / "config.toml", "--lambda-prior", 1, "--out", tmp_path / "t") == 2
        assert "train.prompts" in capsys.readouterr().err


class TestEnhance:
    def test_zero_head_identity(self, image_dir, tmp_path):
        save_enhancer(tmp_path / "w", build_enhancer(0))
        assert run("enhance", "--weights", tmp_path / "w", "--input", image_dir, "--out", tmp_path / "o") == 0
        for src in image_dir.iterdir():
            np.testing.assert_array_equal(read_image(tmp_path / "o" / src.name), read_image(src))
            assert (tmp_path / "o" / src.name).read_bytes() == src.read_bytes()

    def test_scale_one_matches_manual(self, image_dir, tmp_path):
        net = build_enhancer(1)
        with torch.no_grad():
            net.conv7.weight.normal_(0, 0.02, generator=torch.Generator().manual_seed(0))
        save_enhancer(tmp_path / "w", net)
        assert run("enhance", "--weights", tmp_path / "w", "--input", image_dir, "--scale", 1, "--out", tmp_path / "o") == 0
        for src in image_dir.iterdir():
            manual = quantize(enhance(read_image(src), net, 1)).astype(int)
            got = quantize(read_image(tmp_path / "o" / src.name)).astype(int)
            assert np.abs(manual - got).max() <= 1

    def test_report_macs(self, tmp_path, rng, capsys):
        # scale 32 needs an input large enough to leave an 8-pixel estimation map
        write_image(tmp_path / "big" / "x.png", rng.random((512, 512, 3)) * 0.3)
        save_enhancer(tmp_path / "w", build_enhancer(0))
        args = ["enhance", "--weights", tmp_path / "w", "--input", tmp_path / "big", "--scale", 32, "--report-macs",
                "--macs-size", "1024x1024", "--out", tmp_path / "o"]
        assert run(*args) == 0
        assert "ratio" in capsys.readouterr().out
        assert read_json(tmp_path / "o" / "summary.json")["macs"]["estimator_ratio"] >= 1000

    def test_unreadable_skipped(self, image_dir, tmp_path):
        (image_dir / "broken.png").write_bytes(b"not an image")
        save_enhancer(tmp_path / "w", build_enhancer(0))
        assert run("enhance", "--weights", tmp_path / "w", "--input", image_dir, "--out", tmp_path / "o") == 0
        summary = read_json(tmp_path / "o" / "summary.json")
        assert summary["skipped"] == 1 and summary["written"] == 3 and summary["warnings"] >= 1

    def test_checkpoint_weights(self, fixture_dir, image_dir, tmp_path):
        assert run("train", "--config", fixture_dir / "config.toml", "--out", tmp_path / "t") == 0
        ckpt = tmp_path / "t" / "checkpoints" / "epoch_0001"
        assert run("enhance", "--weights", ckpt, "--input", image_dir, "--out", tmp_path / "o") == 0

    def test_missing_weights(self, image_dir, tmp_path):
        assert run("enhance", "--weights", tmp_path / "none", "--input", image_dir, "--out", tmp_path / "o") == 2


class TestEval:
    def test_fullref_identical(self, image_dir, tmp_path):
        assert run("eval", "fullref", "--pred", image_dir, "--ref", image_dir, "--out", tmp_path / "e") == 0
        rows = read_csv(tmp_path / "e" / "fullref.csv")
        assert rows[-2] == ["mean", "inf", "1.0"]
        assert read_json(tmp_path / "e" / "manifest.json")["command"] == "eval fullref"

    def test_map(self, tmp_path):
        preds, truths = three_box_detections()
        (tmp_path / "p.json").write_text(json.dumps(preds))
        (tmp_path / "t.json").write_text(json.dumps(truths))
        assert run("eval", "map", "--pred", tmp_path / "p.json", "--truth", tmp_path / "t.json", "--out", tmp_path / "e") == 0
        rows = read_csv(tmp_path / "e" / "map.csv")
        assert rows[-1][0] == "mean" and float(rows[-1][1]) == enumerated_ap([True, False, True], 2)

    def test_map_schema_error(self, tmp_path, capsys):
        (tmp_path / "p.json").write_text(json.dumps([{"image_id": "a"}]))
        assert run("eval", "map", "--pred", tmp_path / "p.json", "--truth", tmp_path / "p.json", "--out", tmp_path / "e") == 1
        assert "row 0" in capsys.readouterr().err

    def test_blend(self, image_dir, tmp_path, rng):
        normal = tmp_path / "normal"
        for src in image_dir.iterdir():
            write_image(normal / src.name, np.clip(read_image(src) * 3, 0, 1))
        args = ["eval", "blend", "--low", image_dir, "--normal", normal, "--alphas", "0,0.5,1", "--out", tmp_path / "e"]
        assert run(*args) == 0
        rows = read_csv(tmp_path / "e" / "blend.csv")
        assert rows[0] == ["pair_id", "alpha", "psnr_db", "ssim"]
        body = [r for r in rows[1:] if r[0] not in ("mean", "std")]
        assert len(body) == 3 * 3
        assert all(sum(r[0] == src.name for r in body) == 3 for src in image_dir.iterdir())
        assert (tmp_path / "e" / "blended").is_dir()


class TestExportDescriptions:
    def test_jsonl(self, fixture_dir, tmp_path):
        assert run("export-descriptions", "--config", fixture_dir / "config.toml", "--out", tmp_path / "d") == 0
        lines = [json.loads(line) for line in (tmp_path / "d" / "descriptions.jsonl").read_text().splitlines()]
        assert len(lines) == 32
        assert set(lines[0]) == {"patch_id", "content_text", "context_text"}
        assert lines[0]["patch_id"] == "img00.png#TL"


class TestEntryPoint:
    def test_console_help(self):
        out = subprocess.run([sys.executable, "-m", "cuelight.cli", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for command in ("learn-prior", "fine-tune-heads", "train", "enhance", "eval", "export-descriptions"):
            assert command in out.stdout
