"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration errors, 3 for runtime errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .bev import density_heatmap, point_counts, project_3d_to_2d, write_grid
from .costs import report_costs
from .errors import ConfigError, LayerError, VoxPruneError
from .filtering import calibrate_beta, r_inbox
from .pipeline import (
    Model,
    PipelineConfig,
    build_model,
    calibration_cloud,
    filter_point_samples,
    heatmap_grid,
    run_pipeline,
    with_refit_2d_norms,
)
from .experiments import train_on_scenes
from .predictor import PredictorNet
from .scene import SceneSpec, boxes_on_grid, canonical_scene_spec, generate_scene, random_scene_spec
from .voxel import VoxelGridSpec, read_points, voxelize, write_points

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _dump_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_text(path, text):
    with open(path, "w", newline="") as f:
        f.write(text)


def _digest(t) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(t.coords, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(t.feats, dtype="<f8").tobytes())
    return h.hexdigest()


def _load_cfg(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _load_predictor(cfg: PipelineConfig, required: bool):
    if cfg.predictor_path and os.path.exists(cfg.predictor_path):
        return PredictorNet.load(cfg.predictor_path)
    if required:
        raise ConfigError(f"predictor weights not found: {cfg.predictor_path!r}")
    return None


def _model(cfg: PipelineConfig, need_predictor: bool) -> Model:
    net = _load_predictor(cfg, need_predictor)
    if cfg.model_path and os.path.exists(cfg.model_path):
        return Model.load(cfg.model_path, cfg, net)
    return build_model(cfg, calibration_cloud(cfg.seed), cfg.seed, net)


def _needs_predictor(cfg: PipelineConfig) -> bool:
    f = cfg.filter
    return f.drop_rate > 0 and bool(cfg.filter_points()) and f.score_mode in ("predictor+density", "predictor")


def _inputs(cfg: PipelineConfig, override):
    """``(name, points, boxes or None)`` for each input; the canonical scene when none are given."""
    paths = [override] if override else list(cfg.inputs)
    if not paths:
        sc = generate_scene(canonical_scene_spec())
        return [("canonical", sc.points, sc.boxes)]
    out = []
    for p in paths:
        boxes = None
        side = os.path.splitext(p)[0] + ".boxes.json"
        if os.path.exists(side):
            boxes = SceneSpec.from_dict({"boxes": json.load(open(side))}).boxes
        out.append((os.path.splitext(os.path.basename(p))[0], read_points(p), boxes))
    return out


def _summary(cfg, res, boxes):
    out = {
        "layers": [
            {"name": e.name, "dense_pre": e.dense_pre, "dense_post": e.dense_post, "n_out": e.n_out}
            for e in res.ledger.layers
            if e.stage != "predictor"
        ],
        "totals": res.ledger.totals(),
        "final_2d_sha256": _digest(res.final_2d),
        "final_2d_dense_rate": res.final_2d.dense_rate,
        "bev_dense_rate": res.bev.dense_rate,
        "dropped": {p: int(len(d)) for p, d in sorted(res.dropped.items())},
    }
    if boxes is not None:
        out["r_inbox"] = {}
        for p, d in sorted(res.dropped.items()):
            stride = cfg.stride_before(p)
            grid = cfg.grid.coarsened(stride) if stride > 1 else cfg.grid
            out["r_inbox"][p] = r_inbox(d, boxes_on_grid(boxes, grid))
    return out


def _write_artifacts(out_dir, res):
    for name, arr in sorted(res.artifacts.items()):
        if name.startswith("mask_"):
            write_grid(os.path.join(out_dir, f"{name}.pgm"), arr.astype(float), "pgm")
        else:
            write_grid(os.path.join(out_dir, f"{name}.csv"), arr, "csv")
            write_grid(os.path.join(out_dir, f"{name}.pgm"), arr, "pgm")


def cmd_voxelize(args):
    grid = _grid_from(args.grid)
    t = voxelize(read_points(args.cloud), grid, args.reduce)
    os.makedirs(args.out, exist_ok=True)
    cols = ["x", "y", "z"] + [f"f{i}" for i in range(t.channels)]
    lines = [",".join(cols)]
    for c, f in zip(t.coords, t.feats):
        lines.append(",".join([str(int(v)) for v in c] + [repr(float(v)) for v in f]))
    _write_text(os.path.join(args.out, "voxels.csv"), "\n".join(lines) + "\n")
    summary = {"voxels": len(t), "channels": t.channels, "dense_rate": t.dense_rate, "sha256": _digest(t)}
    _dump_json(os.path.join(args.out, "voxels.json"), summary)
    print(json.dumps(summary, sort_keys=True))


def _grid_from(path) -> VoxelGridSpec:
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read grid config {path}: {e}") from e
    try:
        return VoxelGridSpec.from_dict(d.get("grid", d))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed grid spec: {e}") from e


def _run_all(cfg, model, inputs, out_dir, tag=""):
    results = []
    for name, pts, boxes in inputs:
        d = out_dir if len(inputs) == 1 else os.path.join(out_dir, name)
        os.makedirs(d, exist_ok=True)
        res = run_pipeline(model, pts, cfg)
        _write_text(os.path.join(d, f"ledger{tag}.csv"), res.ledger.to_csv())
        _dump_json(os.path.join(d, f"summary{tag}.json"), _summary(cfg, res, boxes))
        if not tag:
            _write_artifacts(d, res)
        results.append((d, res))
    return results


def cmd_run(args):
    cfg = _load_cfg(args)
    model = _model(cfg, _needs_predictor(cfg))
    inputs = _inputs(cfg, args.input)
    os.makedirs(cfg.output_dir, exist_ok=True)
    model.save(os.path.join(cfg.output_dir, "model.json"))
    for d, res in _run_all(cfg, model, inputs, cfg.output_dir):
        t = res.ledger.totals()
        print(f"{d}: 3d FLOPs {t['3d']['flops']}, 2d FLOPs {t['2d']['flops']}, final dense rate {res.final_2d.dense_rate:.4f}")


def cmd_profile(args):
    cfg = _load_cfg(args)
    model = _model(cfg, _needs_predictor(cfg))
    base_cfg = cfg.without_filtering()
    base_model = model
    if args.dense_baseline:
        base_cfg = base_cfg.with_norm_2d("normal")
        base_model = with_refit_2d_norms(model, base_cfg, calibration_cloud(cfg.seed))
    inputs = _inputs(cfg, args.input)
    os.makedirs(cfg.output_dir, exist_ok=True)
    opt = _run_all(cfg, model, inputs, cfg.output_dir, "_opt")
    base = _run_all(base_cfg, base_model, inputs, cfg.output_dir, "_base") if args.baseline else None
    for i, (d, res) in enumerate(opt):
        if base is None:
            continue
        rep = report_costs(res.ledger, base[i][1].ledger)
        _write_text(os.path.join(d, "report.csv"), rep.to_csv())
        _write_text(os.path.join(d, "report.txt"), rep.to_text())
        print(rep.to_text(), end="")


def cmd_train(args):
    cfg = _load_cfg(args)
    model = _model(cfg, False)
    scenes = [generate_scene(random_scene_spec(cfg.seed * 1000 + i)) for i in range(args.scenes)]
    points = args.points.split(",") if args.points else None
    out = args.weights or cfg.predictor_path
    if not out:
        raise ConfigError("no output path for predictor weights (set predictor_path or --weights)")
    net = model.predictor if args.resume and model.predictor is not None else None
    run = train_on_scenes(model, scenes, points, args.epochs, args.lr, args.schedule, args.sigma, cfg.seed, net)
    run.net.save(out)
    report = {"initial_mse": run.initial_mse, "epoch_loss": run.epoch_loss, "final_mse": run.final_mse,
              "samples": run.samples}
    print(json.dumps(report, sort_keys=True))


def cmd_gen_scene(args):
    if args.spec:
        spec = SceneSpec.load(args.spec)
    elif args.random is not None:
        spec = random_scene_spec(args.random)
    else:
        spec = canonical_scene_spec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    sc = generate_scene(spec)
    stem = os.path.splitext(args.out)[0]
    write_points(args.out, sc.points)
    _dump_json(stem + ".boxes.json", [b.__dict__ for b in sc.boxes])
    np.savetxt(stem + ".labels.csv", sc.labels, fmt="%d")
    print(json.dumps({"points": int(len(sc.points)), "boxes": len(sc.boxes)}))


def cmd_calibrate_beta(args):
    cfg = _load_cfg(args)
    model = _model(cfg, True)
    point = args.point or cfg.filter_points()[0]
    scenes = [generate_scene(random_scene_spec(cfg.seed * 1000 + 500 + i)) for i in range(args.scenes)]
    pairs = []
    for sc, (x, _, pool) in zip(scenes, filter_point_samples(model, scenes, [point], cfg)):
        dens = density_heatmap(sc.points, heatmap_grid(cfg), cfg.filter.g)
        pairs.append((x, dens.upsampled(pool, x.extent)))
    cands = [float(c) for c in args.candidates.split(",")] if args.candidates else []
    beta = calibrate_beta(pairs, model.predictor, cands, cfg.pool_at(point))
    print(json.dumps({"beta": beta, "point": point, "scenes": len(scenes)}))


def cmd_stats(args):
    pts = read_points(args.cloud)
    grid = _grid_from(args.grid) if args.grid else PipelineConfig().grid
    t = voxelize(pts, grid)
    bev = project_3d_to_2d(t, grid.extent[:2])
    coarse = grid.coarsened(args.bev_stride)
    counts = point_counts(pts, coarse)
    dens = density_heatmap(pts, coarse, args.g).values
    hist, edges = np.histogram(dens, bins=10, range=(0.0, 1.0))
    report = {
        "points": int(len(pts)),
        "voxels": len(t),
        "voxel_dense_rate": t.dense_rate,
        "bev_dense_rate": bev.dense_rate,
        "coarse_bev_dense_rate": float((counts > 0).mean()),
        "density_histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in hist]},
    }
    print(json.dumps(report, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxprune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("voxelize", help="quantize a point file onto the grid")
    s.add_argument("cloud")
    s.add_argument("--grid", required=True, help="config or grid JSON")
    s.add_argument("--reduce", default="mean", choices=["mean", "max", "count"])
    s.add_argument("--out", default="voxelized")
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("run", help="run the pipeline and write ledger and artifacts")
    s.add_argument("config")
    s.add_argument("--input")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("profile", help="run with filtering and compare against the unfiltered baseline")
    s.add_argument("config")
    s.add_argument("--baseline", action="store_true", help="also run the unfiltered baseline and report ratios")
    s.add_argument("--dense-baseline", action="store_true", help="baseline uses normal batch norm in 2D")
    s.add_argument("--input")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("train-predictor", help="train the importance predictor on synthetic scenes")
    s.add_argument("config")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=0.003)
    s.add_argument("--schedule", default="one-cycle", choices=["constant", "one-cycle"])
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--sigma", type=float, default=5.0)
    s.add_argument("--points", help="comma-separated filter points, default all configured")
    s.add_argument("--weights", help="output path, default the config's predictor_path")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("gen-scene", help="write a synthetic point file with its boxes and labels")
    s.add_argument("spec", nargs="?", help="scene spec JSON; canonical scene when omitted")
    s.add_argument("--random", type=int, metavar="SEED", help="draw from the random scene family")
    s.add_argument("--out", default="scene.bin")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("calibrate-beta", help="pick the density exponent by variance matching")
    s.add_argument("config")
    s.add_argument("--candidates", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    s.add_argument("--scenes", type=int, default=10)
    s.add_argument("--point")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_calibrate_beta)

    s = sub.add_parser("stats", help="dense-rate and density-histogram report for a point file")
    s.add_argument("cloud")
    s.add_argument("--grid")
    s.add_argument("--bev-stride", type=int, default=8)
    s.add_argument("--g", type=int, default=5)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LayerError as e:
        code = EXIT_CONFIG if isinstance(e.cause, ConfigError) else EXIT_RUNTIME
        print(f"error in layer {e.layer}: {e.cause}", file=sys.stderr)
        return code
    except (VoxPruneError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
