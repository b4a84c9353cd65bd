import json

import numpy as np
import pytest

from lear.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, EXIT_OK, EXIT_UNMATCHED, MANIFEST, main, read_manifest)
from lear.io import load_raw, save_raw, write_idx_images, write_idx_labels
from lear.render import render_grid

FAST = {"epochs": 1, "batch_size": 16, "max_steps_backbone": 2, "cmg_epochs": 1, "cmg_batch_size": 8,
        "max_steps_cmg": 2, "xga_epochs": 1, "xga_batch_size": 8, "max_steps_xga": 2}


@pytest.fixture(scope="module")
def mnist(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 40), ("t10k", 20)):
        write_idx_images(d / f"{prefix}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28), dtype=np.uint8))
        write_idx_labels(d / f"{prefix}-labels-idx1-ubyte", np.arange(n) % 10)
    return d


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "cfg.json"
    p.write_text(json.dumps({"hyperparams": FAST}))
    return p


@pytest.fixture(scope="module")
def trained(mnist, config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train-backbone", "--config", str(config), "--data", str(mnist), "--out", str(out)]) == EXIT_OK
    return out


def run(*argv):
    return main([str(a) for a in argv])


def test_ingest_report(mnist, tmp_path, capsys):
    assert run("ingest", "--data", mnist, "--out", tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "dataset_report.json").read_text())
    assert report["train"]["count"] == 40 and report["train"]["shape"] == [28, 28, 1]
    assert report["train"]["histogram"] == [4] * 10
    assert report["test"]["min"] == 0.0 and report["test"]["max"] == 1.0
    assert "ingest" in read_manifest(tmp_path)["stages"]


def test_ingest_bad_magic(tmp_path):
    write_idx_images(tmp_path / "train-images-idx3-ubyte", np.zeros((1, 2, 2), np.uint8))
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(b"\x00\x00\x00\x07" + b"\x00" * 5)
    assert run("ingest", "--data", tmp_path, "--out", tmp_path / "o") == EXIT_DATA


def test_missing_data_dir(tmp_path, capsys):
    code = run("train-backbone", "--data", tmp_path / "absent", "--out", tmp_path / "o")
    assert code == EXIT_DATA
    assert "absent" in capsys.readouterr().err


def test_config_errors(mnist, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"hyperparams": {"lambda1": -1}}))
    assert run("train-backbone", "--config", bad, "--data", mnist, "--out", tmp_path / "a") == EXIT_CONFIG
    bad.write_text(json.dumps({"colour": "red"}))
    assert run("train-backbone", "--config", bad, "--data", mnist, "--out", tmp_path / "b") == EXIT_CONFIG
    bad.write_text("{not json")
    assert run("train-backbone", "--config", bad, "--data", mnist, "--out", tmp_path / "c") == EXIT_CONFIG


def test_train_backbone_outputs_and_determinism(trained, mnist, config, tmp_path):
    ck = trained / "checkpoints"
    assert (ck / "backbone.blob").exists() and (ck / "backbone.manifest.json").exists()
    assert (trained / "config.json").exists()
    stage = read_manifest(trained)["stages"]["train-backbone"]
    assert {"command", "config_path", "hyperparams", "dataset_fingerprint", "artifacts", "started", "finished",
            "seed"} <= set(stage)
    assert run("train-backbone", "--config", config, "--data", mnist, "--out", tmp_path) == EXIT_OK
    a = (trained / "reports" / "backbone_metrics.json").read_text()
    assert a == (tmp_path / "reports" / "backbone_metrics.json").read_text()


def test_refuses_overwrite_without_force(trained, mnist, config):
    assert run("train-backbone", "--config", config, "--data", mnist, "--out", trained) == EXIT_CONFIG
    assert len(list(trained.glob(MANIFEST))) == 1


def test_stage_ordering(mnist, config, tmp_path):
    assert run("train-xga", "--config", config, "--data", mnist, "--out", tmp_path) == EXIT_MISSING
    assert run("train-cmg", "--config", config, "--data", mnist, "--out", tmp_path) == EXIT_MISSING
    assert run("iterate", "--config", config, "--data", mnist, "--out", tmp_path) == EXIT_MISSING


def test_phases_and_explain(trained, mnist, config, capsys):
    assert run("train-cmg", "--config", config, "--data", mnist, "--out", trained) == EXIT_OK
    assert run("train-xga", "--config", config, "--data", mnist, "--out", trained) == EXIT_OK
    rows = (trained / "logs" / "cmg_1.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + FAST["max_steps_cmg"]
    assert (trained / "checkpoints" / "xga_1.blob").exists()

    capsys.readouterr()
    assert run("explain", "--out", trained, "--data", mnist, "--index", 3, "--target", 8) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["target"] == [0.0] * 8 + [1.0, 0.0]
    assert abs(sum(info["posterior_input"]) - 1) < 1e-6
    m, meta = load_raw(info["png"].replace(".png", "_map.raw"))
    assert m.shape == (28, 28, 1)
    assert run("explain", "--out", trained, "--data", mnist, "--target", "0:1:2") == EXIT_CONFIG

    assert run("evaluate", "--out", trained, "--data", mnist) == EXIT_OK
    ev = json.loads((trained / "reports" / "evaluation.json").read_text())
    assert 0 <= ev["accuracy"] <= 1 and 0 <= ev["mauc"] <= 1


def test_iterate_counts(trained, mnist, config, tmp_path):
    import shutil

    out = tmp_path / "it"
    shutil.copytree(trained / "checkpoints", out / "checkpoints", ignore=shutil.ignore_patterns("cmg_*", "disc_*",
                                                                                                  "xga_*"))
    assert run("iterate", "--config", config, "--data", mnist, "--out", out, "--iters", 3) == EXIT_OK
    for k in (1, 2, 3):
        assert (out / "checkpoints" / f"cmg_{k}.blob").exists()
        assert (out / "checkpoints" / f"xga_{k}.blob").exists()
    summary = json.loads((out / "reports" / "iterations.json").read_text())
    assert [s["encoder_mode"] for s in summary] == ["plain", "xga", "xga"]


def _gt_dir(tmp_path, n=3):
    rng = np.random.default_rng(0)
    d = tmp_path / "gt"
    for i in range(n):
        for direction in ("plus", "minus"):
            save_raw(d / f"s{i}_{direction}.raw", rng.normal(size=(4, 4, 4, 1)), subject=f"s{i}", scenario="0-2",
                     direction=direction)
    return d


def test_evaluate_self_and_unmatched(tmp_path):
    gt = _gt_dir(tmp_path)
    assert run("evaluate", "--out", tmp_path / "r", "--gt", gt, "--pred", gt, "--shuffle") == EXIT_OK
    res = json.loads((tmp_path / "r" / "reports" / "evaluation.json").read_text())
    assert res["ncc_plus"] == pytest.approx(1.0) and res["ncc_minus"] == pytest.approx(1.0)
    assert res["shuffled_plus"] < 1.0
    header = (tmp_path / "r" / "reports" / "ncc.csv").read_text().splitlines()[0]
    assert "direction" in header or "plus" in header
    (gt / "s0_plus.raw").rename(tmp_path / "moved.raw")
    (gt / "s0_plus.json").unlink()
    pred = _gt_dir(tmp_path / "p")
    assert run("evaluate", "--out", tmp_path / "r", "--gt", gt, "--pred", pred) == EXIT_UNMATCHED


def test_evaluate_needs_inputs(tmp_path):
    assert run("evaluate", "--out", tmp_path) == EXIT_CONFIG


def test_make_phantom(tmp_path):
    cfg = tmp_path / "ph.json"
    cfg.write_text(json.dumps({"shape": [24, 28, 24, 1], "jitter": 1.0, "samples_per_class": 2,
                               "test_samples_per_class": 1, "longitudinal_subjects": 2}))
    out = tmp_path / "ph"
    assert run("make-phantom", "--config", cfg, "--out", out) == EXIT_OK
    assert len(list((out / "train").glob("*.raw"))) == 6
    assert len(list((out / "test").glob("*.raw"))) == 3
    assert len(list((out / "longitudinal").glob("*_c*.raw"))) == 6
    plus, meta = load_raw(next((out / "longitudinal" / "gt").glob("*_0-2_plus.raw")))
    assert meta["direction"] == "plus" and plus.shape == (24, 28, 24, 1)
    cfg.write_text(json.dumps({"shape": [24, 28, 24, 2]}))
    assert run("make-phantom", "--config", cfg, "--out", tmp_path / "bad") == EXIT_CONFIG


def test_render_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    x, m = rng.random((8, 8, 1)), rng.normal(size=(8, 8, 1))
    kw = dict(posterior_x=[0.2, 0.8], posterior_tilde=[0.9, 0.1], target=[1.0, 0.0])
    a = render_grid(x, m, x + m, tmp_path / "a.png", **kw).read_bytes()
    b = render_grid(x, m, x + m, tmp_path / "b.png", **kw).read_bytes()
    assert a == b and a[:8] == b"\x89PNG\r\n\x1a\n"
    v = rng.random((6, 7, 5, 1))
    c = render_grid(v, v - 0.5, v, tmp_path / "c.png").read_bytes()
    assert c == render_grid(v, v - 0.5, v, tmp_path / "d.png").read_bytes()


def test_phantom_pipeline(tmp_path, capsys):
    ph = tmp_path / "ph.json"
    ph.write_text(json.dumps({"shape": [24, 28, 24, 1], "jitter": 1.0, "samples_per_class": 3,
                              "test_samples_per_class": 1, "longitudinal_subjects": 2}))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"width": 1 / 16, "disc_width": 1 / 8,
                               "hyperparams": {**FAST, "batch_size": 4, "cmg_batch_size": 3, "xga_batch_size": 3}}))
    data, out = tmp_path / "data", tmp_path / "run"
    assert run("make-phantom", "--config", ph, "--out", data) == EXIT_OK
    assert run("train-backbone", "--config", cfg, "--data", data, "--out", out) == EXIT_OK
    assert run("train-cmg", "--config", cfg, "--data", data, "--out", out) == EXIT_OK
    capsys.readouterr()
    assert run("evaluate", "--config", cfg, "--out", out, "--gt", data / "longitudinal" / "gt", "--shuffle",
               "--data", data) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert {"ncc_plus", "ncc_minus", "shuffled_plus", "shuffled_minus", "accuracy", "mauc"} <= set(res)
    assert len(list((out / "reports" / "pred_maps").glob("*.raw"))) == 2 * 3 * 2
    assert run("explain", "--config", cfg, "--out", out, "--data", data, "--target", "0:2:0.5") == EXIT_OK
    assert list((out / "reports" / "explain").glob("*.png"))
