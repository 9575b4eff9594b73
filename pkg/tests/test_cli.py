import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handfit.cli import main
from handfit.imageio import read_netpbm
from handfit.metrics import compute_pck_auc, compute_seg_metrics
from handfit.mesh import synthesize_mesh
from handfit.raster import rasterize_hard


def test_pck_identical_is_perfect(rng):
    j = rng.normal(size=(4, 21, 3))
    out = compute_pck_auc(j, j, np.linspace(0.01, 0.05, 5))
    np.testing.assert_array_equal(out["pck"], 1.0)
    assert out["auc"] == 1.0


def test_pck_step_function(rng):
    j = rng.normal(size=(3, 21, 3))
    out = compute_pck_auc(j + [0.0, 0.03, 0.0], j, [0.01, 0.02, 0.035, 0.04])
    np.testing.assert_array_equal(out["pck"], [0, 0, 1, 1])


def test_pck_matches_brute_force(rng):
    p, g = rng.normal(size=(5, 21, 3)), rng.normal(size=(5, 21, 3))
    t = np.linspace(0.5, 3.0, 6)
    out = compute_pck_auc(p, g, t)
    for x, v in zip(t, out["pck"]):
        hits = sum(np.sqrt(sum((p[i, k, a] - g[i, k, a]) ** 2 for a in range(3))) <= x
                   for i in range(5) for k in range(21))
        assert v == hits / 105
    trap = sum((out["pck"][i] + out["pck"][i + 1]) / 2 * (t[i + 1] - t[i]) for i in range(5)) / (t[-1] - t[0])
    assert out["auc"] == pytest.approx(trap)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_pck_monotone(seed):
    rng = np.random.default_rng(seed)
    out = compute_pck_auc(rng.normal(size=(2, 21, 3)), rng.normal(size=(2, 21, 3)), np.linspace(0, 4, 9))
    assert np.all(np.diff(out["pck"]) >= 0) and 0 <= out["auc"] <= 1


def test_seg_metrics_closed_forms():
    g = np.zeros((10, 10))
    g[:, :4] = 1
    same = compute_seg_metrics(g, g)
    assert same == {"iou": 1.0, "precision": 1.0, "recall": 1.0, "f1": 100.0}
    other = np.zeros((10, 10))
    other[:, 6:] = 1
    assert compute_seg_metrics(other, g) == {"iou": 0.0, "precision": 0.0, "recall": 0.0, "f1": 0.0}
    half = np.zeros((10, 10))
    half[:, :2] = 1
    m = compute_seg_metrics(half, g)
    assert (m["precision"], m["recall"], m["iou"]) == (1.0, 0.5, 0.5)
    assert m["f1"] == pytest.approx(66.67, abs=0.01)
    assert compute_seg_metrics(np.zeros((3, 3)), np.zeros((3, 3)))["iou"] == 1.0


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-toy-model", "--seed", "0", "--out", str(root / "toy.hnda")]) == 0
    assert main(["synth", "--assets", str(root / "toy.hnda"), "--count", "4", "--seed", "1",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--assets", str(root / "toy.hnda"), "--data", str(root / "data"), "--epochs", "1",
                 "--batch-size", "2", "--out-weights", str(root / "w.hndw")]) == 0
    return root


def test_train_writes_weights_and_trace(workspace):
    assert (workspace / "w.hndw").read_bytes().startswith(b"HNDW1\n")
    trace = json.loads((workspace / "w.hndw.trace.json").read_text())
    assert len(trace["loss"]) == 1


def fit(workspace, out, iters, *extra):
    return main(["fit", "--assets", str(workspace / "toy.hnda"), "--weights", str(workspace / "w.hndw"),
                 "--input-manifest", str(workspace / "data"), "--refine-iters", str(iters),
                 "--out", str(workspace / out), *extra])


def test_fit_without_refinement_returns_hme(workspace):
    assert fit(workspace, "fit0", 0) == 0
    pred = json.loads((workspace / "fit0" / "pred" / "000000.json").read_text())
    assert pred["h"] == pred["h_hme"]


def test_fit_with_traces(workspace):
    assert fit(workspace, "fit2", 2, "--traces") == 0
    assert (workspace / "fit2" / "trace" / "000003.csv").is_file()
    lines = (workspace / "fit2" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 4


def test_eval_identical_manifests(workspace):
    assert main(["eval", "--pred", str(workspace / "data"), "--gt", str(workspace / "data"),
                 "--report", str(workspace / "r.json")]) == 0
    report = json.loads((workspace / "r.json").read_text())
    assert report["auc"] == 1.0 and report["seg"]["iou"] == 1.0
    assert all(len(f"{v}".split(".")[-1]) <= 4 for v in report["pck"].values())


def test_eval_prediction_report(workspace):
    fit(workspace, "fit0", 0)
    assert main(["eval", "--pred", str(workspace / "fit0"), "--gt", str(workspace / "data"),
                 "--report", str(workspace / "r0.json"), "--align", "none"]) == 0
    report = json.loads((workspace / "r0.json").read_text())
    assert np.isfinite(report["mean_error"]) and report["align"] == "none"
    assert list(report["pck"].values()) == sorted(report["pck"].values())


def test_render_modes(workspace, assets):
    gt = workspace / "data" / "gt" / "000000.json"
    assert main(["render", "--assets", str(workspace / "toy.hnda"), "--params", str(gt), "--mode", "mask",
                 "--out", str(workspace / "m.pgm")]) == 0
    h = np.array(json.loads(gt.read_text())["h"])
    np.testing.assert_array_equal(read_netpbm(workspace / "m.pgm"), rasterize_hard(synthesize_mesh(h, assets)))
    for mode in ("shaded", "canonical"):
        out = workspace / f"{mode}.ppm"
        assert main(["render", "--assets", str(workspace / "toy.hnda"), "--params", str(gt), "--mode", mode,
                     "--out", str(out)]) == 0
        assert out.read_bytes().startswith(b"P6")


def test_config_file_and_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"assets": str(workspace / "toy.hnda"), "count": 5, "seed": 2,
                               "out": str(tmp_path / "from_config")}))
    assert main(["synth", "--config", str(cfg), "--count", "2"]) == 0
    lines = (tmp_path / "from_config" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_errors_are_single_line(tmp_path, capsys):
    assert main(["fit", "--assets", str(tmp_path / "missing.hnda"), "--weights", "w", "--input-manifest", "m",
                 "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FileNotFoundError:")
    assert main(["train", "--assets", "a"]) == 1
    assert "missing required option(s)" in capsys.readouterr().err
