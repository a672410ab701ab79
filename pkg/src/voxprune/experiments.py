"""Desk-scale experiments shared by the scripts and the acceptance checks."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bev import density_heatmap, project_3d_to_2d
from .boxes import inside_any
from .conv import sparse_conv
from .filtering import keep_flags, r_inbox, score_pixels
from .pipeline import Model, PipelineConfig, _block, filter_point_samples, heatmap_grid
from .predictor import PredictorNet, evaluate, make_samples, prepare_net, train_predictor
from .scene import boxes_on_grid, generate_scene, random_scene_spec
from .voxel import random_drop, voxelize


def scenes(seeds) -> list:
    return [generate_scene(random_scene_spec(int(s))) for s in seeds]


@dataclass
class TrainingRun:
    net: PredictorNet
    initial_mse: float
    final_mse: float
    epoch_loss: list
    samples: int


def train_on_scenes(model: Model, train_scenes, points=None, epochs: int = 10, lr: float = 0.003,
                    schedule: str = "one-cycle", sigma: float = 5.0, seed: int = 0, net=None) -> TrainingRun:
    """Fit the predictor on unfiltered filter-point inputs of ``train_scenes``.

    The initial MSE is measured after compression layers and input scales are
    set up, so the ratio reflects training alone.
    """
    samples = []
    for x, boxes, pool in filter_point_samples(model, train_scenes, points):
        samples += make_samples([(x, boxes)], pool, sigma)
    net = PredictorNet.create(seed=seed) if net is None else net
    net = prepare_net(net, samples, seed)
    initial = evaluate(net, samples)
    net, trace = train_predictor(net, samples, epochs, lr, schedule, sigma=sigma, seed=seed)
    return TrainingRun(net, initial, evaluate(net, samples), trace, len(samples))


def drop_quality(model: Model, test_scenes, point: str = "3d.1", drop_rate: float = 0.25,
                 modes=("predictor+density", "density", "random"), seed: int = 0) -> dict:
    """Mean R_inbox per score mode when dropping at ``point`` of each scene.

    Every mode ranks the same unfiltered input tensor, so only the scoring differs.
    """
    cfg = model.cfg
    pool = cfg.pool_at(point)
    out = {m: [] for m in modes}
    for k, (sc, (x, boxes, _)) in enumerate(zip(test_scenes, filter_point_samples(model, test_scenes, [point]))):
        density = density_heatmap(sc.points, heatmap_grid(cfg), cfg.filter.g).upsampled(pool, x.extent)
        for m in modes:
            fc = replace(cfg.filter, score_mode=m, drop_rate=drop_rate)
            scores = score_pixels(x, fc, model.predictor, density, pool, seed=seed + k)
            keep = keep_flags(scores, x.coords, drop_rate)
            out[m].append(r_inbox(x.coords[~keep], boxes))
    return {m: float(np.mean(v)) for m, v in out.items()}


def inbox_sums(model: Model, voxels, boxes, depth: int = 1) -> np.ndarray:
    """Per-channel BEV feature sums over in-box pixels after the first ``depth`` 3D layers."""
    cfg = model.cfg
    x = voxels
    stride = 1
    for i in range(depth):
        x = sparse_conv(_block(x, cfg.layers_3d[i], model.norms_3d[i]), model.kernels_3d[i])
        stride *= cfg.layers_3d[i].stride
    grid = cfg.grid.coarsened(stride) if stride > 1 else cfg.grid
    bev = project_3d_to_2d(x, x.extent[:2])
    return bev.feats[inside_any(bev.coords, boxes_on_grid(boxes, grid))].sum(axis=0)


def relative_change(a: np.ndarray, ref: np.ndarray) -> float:
    return float(np.abs(a - ref).sum() / np.abs(ref).sum())


def oracle_drop(model: Model, sc, outside: float = 0.7, uniform: float = 0.3, depth: int = 1, seed: int = 0):
    """``(change after dropping `outside` of out-of-box voxels, change after dropping `uniform` of all voxels)``."""
    cfg = model.cfg
    t = voxelize(sc.points, cfg.grid, cfg.reduce)
    ref = inbox_sums(model, t, sc.boxes, depth)
    boxes = boxes_on_grid(sc.boxes, cfg.grid)
    a = inbox_sums(model, random_drop(t, outside, seed, exclude=boxes), sc.boxes, depth)
    b = inbox_sums(model, random_drop(t, uniform, seed + 1), sc.boxes, depth)
    return relative_change(a, ref), relative_change(b, ref)


def dense_rates(model: Model, points, cfg: PipelineConfig = None) -> list:
    """``(layer, dense rate entering the conv before filtering, after filtering)`` per backbone layer."""
    from .pipeline import run_pipeline

    res = run_pipeline(model, points, cfg)
    return [(e.name, e.dense_pre, e.dense_post) for e in res.ledger.layers if e.stage != "predictor"]
