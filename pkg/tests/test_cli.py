import json

import numpy as np
import pytest

from test_pipeline import small_cfg
from voxprune.cli import main
from voxprune.predictor import PredictorNet
from voxprune.voxel import read_points


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    PredictorNet.create([16, 64], seed=0).save(d / "pred.json")
    cfg = small_cfg(predictor_path="pred.json", output_dir="out")
    (d / "cfg.json").write_text(json.dumps(cfg.to_dict()))
    assert main(["gen-scene", "--out", str(d / "scene.bin")]) == 0
    return d


def test_gen_scene_outputs(workdir, capsys):
    pts = read_points(workdir / "scene.bin")
    boxes = json.loads((workdir / "scene.boxes.json").read_text())
    labels = np.loadtxt(workdir / "scene.labels.csv")
    assert len(boxes) == 11 and len(labels) == len(pts)
    assert main(["gen-scene", "--random", "4", "--out", str(workdir / "r.bin")]) == 0
    assert json.loads(capsys.readouterr().out)["points"] == len(read_points(workdir / "r.bin"))


def test_voxelize_and_stats(workdir, capsys):
    out = workdir / "vox"
    assert main(["voxelize", str(workdir / "scene.bin"), "--grid", str(workdir / "cfg.json"), "--out", str(out)]) == 0
    summary = json.loads((out / "voxels.json").read_text())
    assert summary["channels"] == 4
    assert len((out / "voxels.csv").read_text().splitlines()) == summary["voxels"] + 1
    capsys.readouterr()
    assert main(["stats", str(workdir / "scene.bin"), "--grid", str(workdir / "cfg.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert sum(rep["density_histogram"]["counts"]) == 16 * 16


def test_run_writes_artifacts(workdir):
    out = workdir / "run"
    assert main(["run", str(workdir / "cfg.json"), "--input", str(workdir / "scene.bin"), "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"model.json", "ledger.csv", "summary.json", "density.csv", "density.pgm", "mask_3d.1.pgm",
            "heatmap_2d.3.csv"} <= names
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["r_inbox"]) == {"3d.1", "3d.3", "2d.1", "2d.3"}
    assert (out / "density.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")


def test_profile_reports_ratios(workdir, capsys):
    out = workdir / "prof"
    assert main(["profile", str(workdir / "cfg.json"), "--baseline", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "total_2d" in text
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0].startswith("layer,stage,flops_base")
    total = [r for r in rows if r.startswith("total_all")][0].split(",")
    assert float(total[4]) > 1.0
    assert main(["profile", str(workdir / "cfg.json"), "--baseline", "--dense-baseline", "--out", str(out / "d")]) == 0


def test_train_and_calibrate(workdir, capsys):
    w = workdir / "trained.json"
    args = ["train-predictor", str(workdir / "cfg.json"), "--scenes", "1", "--epochs", "2", "--points", "3d.1",
            "--weights", str(w)]
    assert main(args) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["samples"] == 1 and len(rep["epoch_loss"]) == 2
    assert PredictorNet.load(w).input_widths == [16]
    assert main(["calibrate-beta", str(workdir / "cfg.json"), "--scenes", "1", "--candidates", "0,0.5,1"]) == 0
    assert json.loads(capsys.readouterr().out)["beta"] in (0.0, 0.5, 1.0)


def test_exit_codes(workdir, tmp_path):
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    bad = json.loads((workdir / "cfg.json").read_text())
    bad["schema_version"] = 7
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["run", str(tmp_path / "bad.json")]) == 2
    nopred = json.loads((workdir / "cfg.json").read_text())
    nopred["predictor_path"] = str(tmp_path / "none.json")
    (tmp_path / "nopred.json").write_text(json.dumps(nopred))
    assert main(["run", str(tmp_path / "nopred.json"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "odd.bin").write_bytes(b"\0" * 10)
    assert main(["stats", str(tmp_path / "odd.bin")]) == 3
    far = np.full((3, 4), 500.0, dtype="<f4")
    far.tofile(tmp_path / "far.bin")
    assert main(["run", str(workdir / "cfg.json"), "--input", str(tmp_path / "far.bin"), "--out", str(tmp_path / "o")]) == 3
