"""End-to-end command-line workflow on a miniature configuration."""

import json

import numpy as np
import pytest

from stylefield import cli, scene_io


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Run the full pipeline once: synth -> pretrain -> vae -> style."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "runs" / "toy"
    common = ["--set", "resolution=32", "k_samples=8", "steps=4"]

    assert cli.main(["synth", "--out", str(data), "--scenes", "2",
                     "--styles", "4", "--views", "4"] + common) == 0
    assert cli.main(["pretrain", "--run", str(run), "--scenes",
                     str(data / "scenes")] + common) == 0
    assert cli.main(["train-vae", "--run", str(run), "--styles",
                     str(data / "styles"), "--epochs", "3"] + common) == 0
    assert cli.main(["train-style", "--run", str(run), "--scenes",
                     str(data / "scenes"), "--styles",
                     str(data / "styles")] + common) == 0
    return data, run


class TestPipeline:
    def test_artifacts_exist(self, workspace):
        data, run = workspace
        assert (data / "scenes" / "scene00" / "cameras.json").exists()
        assert (data / "scenes" / "scene00" / "flows").exists()
        assert (run / "checkpoints" / "backbone.ckpt").exists()
        assert (run / "checkpoints" / "stylevae.ckpt").exists()
        assert (run / "checkpoints" / "hypernet.ckpt").exists()
        assert (run / "checkpoints" / "bundle.json").exists()
        assert (run / "reports" / "pretrain_log.jsonl").exists()
        assert json.loads((run / "config.echo").read_text())["resolution"] == 32

    def test_render_plain_and_styled(self, workspace, tmp_path):
        data, run = workspace
        bundle = str(run / "checkpoints" / "bundle.json")
        scene = str(data / "scenes" / "scene00")
        plain = tmp_path / "plain.png"
        styled = tmp_path / "styled.png"
        assert cli.main(["render", "--scene", scene, "--bundle", bundle,
                         "--style", "none", "--view", "1",
                         "--out", str(plain)]) == 0
        assert cli.main(["render", "--scene", scene, "--bundle", bundle,
                         "--style", str(data / "styles" / "synth000.png"),
                         "--view", "1", "--out", str(styled)]) == 0
        assert scene_io.load_png(plain).shape == (32, 32, 3)
        assert scene_io.load_png(styled).shape == (32, 32, 3)

    def test_flow_and_eval(self, workspace):
        data, run = workspace
        scene = data / "scenes" / "scene00"
        img0 = scene / "images" / "000.png"
        img1 = scene / "images" / "001.png"
        seq = run / "renders" / "seq0"
        seq.mkdir(parents=True, exist_ok=True)
        for t, p in enumerate([img0, img1]):
            scene_io.save_png(scene_io.load_png(p), seq / f"{t:03d}.png")
        fdir = run / "flows" / "seq0"
        fdir.mkdir(parents=True, exist_ok=True)
        assert cli.main(["flow", "--a", str(img0), "--b", str(img1),
                         "--out", str(fdir / "o1_t000.flo"),
                         "--block", "8", "--radius", "3"]) == 0
        assert cli.main(["eval", "--run", str(run), "--offset", "1"]) == 0
        rows = [json.loads(l) for l in
                (run / "reports" / "report.jsonl").read_text().splitlines()]
        assert rows and rows[0]["offset"] == 1

    def test_eval_rejects_same_flow_source(self, workspace, capsys):
        _, run = workspace
        code = cli.main(["eval", "--run", str(run), "--offset", "1",
                         "--set", "eval_flow_source=\"exact\""])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestErrorPaths:
    def test_missing_checkpoint(self, tmp_path, capsys):
        code = cli.main(["render", "--scene", str(tmp_path), "--bundle",
                         str(tmp_path / "missing.json"), "--style", "none",
                         "--out", str(tmp_path / "o.png")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            cli.main(["frobnicate"])

    def test_bad_override(self, tmp_path, capsys):
        code = cli.main(["synth", "--out", str(tmp_path), "--set", "oops"])
        assert code == 1

    def test_pretrain_no_scenes(self, tmp_path, capsys):
        code = cli.main(["pretrain", "--run", str(tmp_path / "r"),
                         "--scenes", str(tmp_path / "empty")])
        assert code == 1
