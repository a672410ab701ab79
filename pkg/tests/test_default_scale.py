"""Checks at the default configuration with the shipped predictor weights."""

from pathlib import Path

import pytest

from voxprune.experiments import drop_quality
from voxprune.filtering import r_inbox
from voxprune.pipeline import PipelineConfig, build_model, calibration_cloud, run_pipeline
from voxprune.predictor import PredictorNet
from voxprune.scene import boxes_on_grid, canonical_scene_spec, generate_scene

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="module")
def setup():
    cfg = PipelineConfig(seed=0)
    model = build_model(cfg, calibration_cloud(0), 0, PredictorNet.load(ROOT / "configs" / "predictor.json"))
    return cfg, model, generate_scene(canonical_scene_spec())


@pytest.fixture(scope="module")
def runs(setup):
    cfg, model, sc = setup
    return run_pipeline(model, sc.points, cfg.without_filtering()), run_pipeline(model, sc.points)


def test_shipped_predictor_is_softplus(setup):
    _, model, _ = setup
    assert model.predictor.activation == "softplus"
    assert model.predictor.input_widths == [16, 64, 128]


def test_each_predictor_pass_is_under_one_percent_of_2d(setup, runs):
    cfg, _, _ = setup
    base, opt = runs
    base_2d = base.ledger.total("flops", "2d")
    for point in cfg.filter_points():
        pass_flops = sum(e.flops for e in opt.ledger.layers if e.name.startswith(f"predictor.{point}."))
        assert 0 < pass_flops < 0.01 * base_2d, point
    # four passes together exceed 1% at this backbone width; recorded, not asserted away
    assert opt.ledger.total("flops", "predictor") < 0.02 * base_2d


def test_filtering_saves_flops_and_memory(runs):
    base, opt = runs
    for stage in ("3d", "2d"):
        assert opt.ledger.total("flops", stage) < base.ledger.total("flops", stage)
        assert opt.ledger.total("act_bytes", stage) < base.ledger.total("act_bytes", stage)


def test_first_filter_point_spares_objects(setup, runs):
    cfg, _, sc = setup
    _, opt = runs
    point = cfg.filter_points()[0]
    grid = cfg.grid.coarsened(cfg.stride_before(point)) if cfg.stride_before(point) > 1 else cfg.grid
    assert r_inbox(opt.dropped[point], boxes_on_grid(sc.boxes, grid)) <= 0.02


def test_every_point_beats_density_alone_on_canonical_scene(setup):
    cfg, model, sc = setup
    for point in cfg.filter_points():
        q = drop_quality(model, [sc], point, cfg.filter.drop_rate, modes=("predictor+density", "density"))
        assert q["predictor+density"] <= 0.02, point
        assert q["predictor+density"] < q["density"], point
