import json
import os
import subprocess
import sys

import numpy as np
import pytest

from layersplit.cli import main
from layersplit.imaging import load_png


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    assert run_cli("gen-dataset", "--n", 8, "--seed", 7, "--out", root / "data") == 0
    assert run_cli("train", "--dataset", root / "data", "--steps", 200, "--out", root / "train") == 0
    return root


def test_smoke_pipeline_report(smoke):
    out = smoke / "eval"
    assert run_cli("eval", "--dataset", smoke / "data", "--checkpoint", smoke / "train" / "model.ckpt",
                   "--recomposition-seed", 3, "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["coverage"]["evaluated"] == 8 and rep["coverage"]["missing"] == []
    for k in ("psnr_bg", "psnr_comp", "ssim_bg", "ssim_comp"):
        assert np.isfinite(rep["aggregate"][k]["mean"])
    assert len(rep["random_recomposition"]["records"]) == 8
    assert (out / rep["random_recomposition"]["records"][0]["path"]).exists()
    log = (smoke / "train" / "train.log.jsonl").read_text().splitlines()
    assert len(log) == 200


def test_run_json_everywhere(smoke):
    for sub in ("data", "train"):
        rec = json.loads((smoke / sub / "run.json").read_text())
        assert rec["seed"] == 7 if sub == "data" else rec["seed"] == 0
        assert "numpy" in rec["versions"] and rec["config"]
    rec = json.loads((smoke / "train" / "run.json").read_text())
    assert len(rec["inputs"]["dataset"]["sha256"]) == 64
    assert rec["parameters"] <= 1_000_000


def first_item(smoke):
    man = [json.loads(line) for line in (smoke / "data" / "manifest.jsonl").read_text().splitlines()]
    return {k: smoke / "data" / v for k, v in man[0]["paths"].items()}


def test_recompose_own_layers_bit_identical(smoke, tmp_path):
    p = first_item(smoke)
    assert run_cli("recompose", "--bg", p["bg"], "--fg", p["fg"], "--out", tmp_path / "r") == 0
    assert np.array_equal(load_png(tmp_path / "r" / "recomposite.png"), load_png(p["comp"]))


def test_decompose_deterministic(smoke, tmp_path):
    p = first_item(smoke)
    ck = smoke / "train" / "model.ckpt"
    for name in ("a", "b"):
        assert run_cli("decompose", "--checkpoint", ck, "--image", p["comp"], "--mask", p["mask"],
                       "--steps", 10, "--out", tmp_path / name) == 0
    for f in ("bg.png", "fg.png", "recomposite.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resume_continues_step_count(smoke, tmp_path):
    ck = smoke / "train" / "model.ckpt"
    assert run_cli("train", "--dataset", smoke / "data", "--resume", ck, "--steps", 203, "--out", tmp_path / "t") == 0
    assert json.loads((tmp_path / "t" / "run.json").read_text())["steps"] == 203


def test_edit_and_gen_assets(smoke, tmp_path):
    p = first_item(smoke)
    assert run_cli("edit", "--fg", p["fg"], "--dx", 0.1, "--scale", 0.8, "--gains", "1,0.5,0.5",
                   "--bg", p["bg"], "--out", tmp_path / "e") == 0
    assert load_png(tmp_path / "e" / "fg.png").shape == (32, 32, 4)
    assert (tmp_path / "e" / "recomposite.png").exists()
    assert run_cli("gen-assets", "--n", 2, "--out", tmp_path / "a") == 0
    assert sorted(os.listdir(tmp_path / "a" / "assets")) == ["asset00000.json", "asset00000.png",
                                                             "asset00001.json", "asset00001.png"]


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)["error"]


def test_missing_input_exit_and_no_outputs(tmp_path, capsys):
    code = run_cli("recompose", "--bg", tmp_path / "nope.png", "--fg", tmp_path / "nope.png", "--out", tmp_path / "r")
    assert code == 3 and error_line(capsys)["code"] == 3
    assert not (tmp_path / "r").exists() and not list(tmp_path.glob(".r.partial-*"))


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\ntrain:\n  bogus: 3\n")
    assert run_cli("gen-assets", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "bogus" in error_line(capsys)["message"]
    assert not (tmp_path / "o").exists()


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\nassets:\n  n: 3\n")
    assert run_cli("gen-assets", "--config", cfg, "--n", 1, "--out", tmp_path / "o") == 0
    rec = json.loads((tmp_path / "o" / "run.json").read_text())
    assert rec["config"]["assets"]["n"] == 1 and rec["seed"] == 1


def test_unknown_flag_and_subcommand(capsys):
    assert run_cli("gen-assets", "--frobnicate") == 2
    assert error_line(capsys)["code"] == 2
    assert run_cli("explode") == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "layersplit", "recompose", "--bg", "x", "--fg", "y"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode != 0
    assert json.loads(res.stderr.strip().splitlines()[-1])["error"]["code"] == res.returncode
