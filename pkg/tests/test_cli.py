import json

import numpy as np
import pytest
from PIL import Image

from astrogan import cli
from astrogan.colorspace import ImageGrid, Space
from astrogan.datapipe import ManifestEntry, DatasetManifest, read_image, read_manifest, write_image, write_manifest
from conftest import blob_image

pytestmark = pytest.mark.filterwarnings("ignore:FID with:RuntimeWarning")

TINY_UNET = ["--base-width", "4", "--encoder-stages", "2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def make_dataset(root, n_train=4, n_test=2, side=32):
    for split, n, offset in (("train", n_train, 0), ("test", n_test, 100)):
        (root / split).mkdir(parents=True)
        for i in range(n):
            write_image(blob_image(i + offset, side, side), root / split / f"{split}{i}.png")
    return root


@pytest.fixture
def dataset(tmp_path):
    return make_dataset(tmp_path / "data")


def test_unknown_subcommand(capsys):
    assert run("explode") == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert run("colorize", "a.png", "b.png", "--frobnicate") == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_input_is_user_error(tmp_path, capsys):
    assert run("colorize", tmp_path / "nope.png", tmp_path / "out.png") == 1
    assert "nope.png" in capsys.readouterr().err


def test_internal_error_exit_code(tmp_path, monkeypatch):
    def boom(cfg):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(cli, "cmd_colorize", boom)
    assert run("colorize", tmp_path / "a.png", tmp_path / "b.png") == 2


def test_bad_config_file(tmp_path):
    (tmp_path / "c.json").write_text("[1, 2]")
    assert run("colorize", "a.png", "b.png", "--config", tmp_path / "c.json") == 1


def test_pretrain_colorize_pipeline(dataset, tmp_path):
    out = tmp_path / "run"
    assert run("pretrain", "--data", dataset, "--out", out, "--epochs", 1, "--batch-size", 2, *TINY_UNET) == 0
    assert (out / "best.weights").exists() and (out / "run_config.json").exists()

    gray = tmp_path / "gray.png"
    Image.fromarray(np.full((40, 24), 128, np.uint8), mode="L").save(gray)
    assert run("colorize", gray, tmp_path / "c.png", "--weights", out / "best.weights") == 0
    colored = Image.open(tmp_path / "c.png")
    assert colored.mode == "RGB" and colored.size == (24, 40)

    # a color PNG goes through its L channel without complaint
    write_image(blob_image(9, 36, 20), tmp_path / "color.png")
    assert run("colorize", tmp_path / "color.png", tmp_path / "c2.png", "--weights", out / "best.weights") == 0
    assert read_image(tmp_path / "c2.png").shape == (36, 20, 3)


def test_finetune_then_evaluate(dataset, tmp_path):
    pre = tmp_path / "pre"
    ft = tmp_path / "ft"
    assert run("pretrain", "--data", dataset, "--out", pre, "--epochs", 1, "--batch-size", 2, *TINY_UNET) == 0
    args = ["--data", dataset, "--out", ft, "--gen-weights", pre / "best.weights", "--epochs", 1, "--batch-size", 2]
    assert run("finetune", *args, "--disc-width", 4, "--patch-layers", 2) == 0
    assert (ft / "best.weights").exists() and (ft / "disc.weights").exists()
    report = tmp_path / "rep" / "r.json"
    assert run("evaluate", "--data", dataset, "--weights", ft / "best.weights", "--space", "rgb", "--fid", "--out", report) == 0
    data = json.loads(report.read_text())
    assert set(data["per_channel_l1"]) == {"R", "G", "B"} and data["fid"] >= 0
    assert report.with_suffix(".txt").exists()


def test_finetune_rejects_wrong_task(dataset, tmp_path):
    pre = tmp_path / "pre"
    run("pretrain", "--data", dataset, "--out", pre, "--epochs", 1, *TINY_UNET)
    assert run("finetune", "--data", dataset, "--out", tmp_path / "x", "--task", "sr", "--gen-weights", pre / "best.weights") == 1


def test_upscale_wdsr_quadruples(tmp_path):
    write_image(blob_image(0, 12, 20), tmp_path / "lr.png")
    args = ["--scale", 4, "--arch", "wdsr", "--base-width", 4, "--n-res-blocks", 1]
    assert run("upscale", tmp_path / "lr.png", tmp_path / "hr.png", *args) == 0
    assert read_image(tmp_path / "hr.png").shape == (48, 80, 3)


def test_sr_train_and_upscale(dataset, tmp_path):
    out = tmp_path / "sr"
    args = ["--task", "sr", "--arch", "edsr", "--scale", 2, "--base-width", 4, "--n-res-blocks", 1]
    assert run("pretrain", "--data", dataset, "--out", out, "--epochs", 1, *args) == 0
    write_image(blob_image(0, 10, 10), tmp_path / "lr.png")
    up = ["--scale", 2, "--arch", "edsr", "--weights", out / "best.weights"]
    assert run("upscale", tmp_path / "lr.png", tmp_path / "hr.png", *up) == 0
    assert read_image(tmp_path / "hr.png").shape == (20, 20, 3)
    # mismatched architecture is a user error
    assert run("upscale", tmp_path / "lr.png", tmp_path / "x.png", "--scale", 2, "--arch", "wdsr", "--weights", out / "best.weights") == 1


@pytest.mark.parametrize("space", ["lab", "rgb"])
def test_evaluate_oracle_is_zero(dataset, tmp_path, space):
    report = tmp_path / f"{space}.json"
    assert run("evaluate", "--data", dataset, "--model", "oracle", "--space", space, "--fid", "--out", report) == 0
    data = json.loads(report.read_text())
    assert all(v == 0 for v in data["per_channel_l1"].values())
    assert all(v == 0 for v in data["per_channel_l2"].values())
    assert data["fid"] < 1e-6


def test_evaluate_needs_a_model(dataset, tmp_path):
    assert run("evaluate", "--data", dataset, "--space", "rgb", "--out", tmp_path / "r.json") == 1


def test_config_precedence(dataset, tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"epochs": 2, "batch_size": 3, "base_width": 4, "encoder_stages": 2, "lr": 1e-3}))
    out = tmp_path / "run"
    assert run("pretrain", "--data", dataset, "--out", out, "--config", config, "--epochs", 1) == 0
    resolved = json.loads((out / "run_config.json").read_text())
    assert resolved["epochs"] == 1  # flag beats file
    assert resolved["batch_size"] == 3 and resolved["lr"] == 1e-3  # file beats default
    assert resolved["patience"] == 10  # default
    assert json.loads((out / "state.json").read_text())["epoch"] == 1


def test_same_seed_same_bytes(dataset, tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("pretrain", "--data", dataset, "--out", out, "--epochs", 2, "--batch-size", 2, "--seed", 7, *TINY_UNET) == 0
        rep = tmp_path / f"{name}.json"
        assert run("evaluate", "--data", dataset, "--weights", out / "best.weights", "--space", "lab", "--out", rep) == 0
        outputs.append(((out / "best.weights").read_bytes(), rep.read_bytes()))
    assert outputs[0] == outputs[1]


def test_dataset_commands(tmp_path, monkeypatch):
    src = tmp_path / "src"
    src.mkdir()
    entries = []
    for i in range(5):
        write_image(blob_image(i, 40, 64), src / f"{i}.png")
        entries.append(ManifestEntry(f"img{i}", str(src / f"{i}.png")))
    manifest = tmp_path / "m.jsonl"
    write_manifest(DatasetManifest(tuple(entries)), manifest)

    monkeypatch.setenv("ASTRO_DATA_DIR", str(tmp_path / "raw"))
    assert run("dataset", "fetch", "--manifest", manifest) == 0
    assert len(list((tmp_path / "raw").glob("img*.png"))) == 5
    assert json.loads((tmp_path / "raw" / "fetch_report.json").read_text())["fetched"]

    assert run("dataset", "split", "--manifest", manifest, "--test-fraction", 0.2, "--seed", 1) == 0
    splits = [e.split.value for e in read_manifest(manifest).entries]
    assert splits.count("test") == 1 and splits.count("train") == 4

    prep = tmp_path / "prep"
    assert run("dataset", "prepare", "--manifest", manifest, "--out", prep, "--side", 32, "--tiles", 2) == 0
    assert len(list((prep / "train").glob("*.png"))) == 8
    assert len(list((prep / "test").glob("*.png"))) == 2
    assert read_image(next((prep / "test").glob("*.png"))).shape == (32, 32, 3)


def test_fetch_failure_exit_code(tmp_path):
    manifest = tmp_path / "m.jsonl"
    write_manifest(DatasetManifest((ManifestEntry("x", str(tmp_path / "missing.png")),)), manifest)
    assert run("dataset", "fetch", "--manifest", manifest, "--dest", tmp_path / "d") == 1
