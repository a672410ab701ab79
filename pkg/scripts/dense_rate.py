"""Dense rate entering each backbone layer on the canonical scene, for several settings.

    python scripts/dense_rate.py --drop 0.8
"""

import argparse
from dataclasses import replace

from voxprune.experiments import dense_rates
from voxprune.pipeline import PipelineConfig, build_model, calibration_cloud, with_refit_2d_norms
from voxprune.predictor import PredictorNet
from voxprune.scene import canonical_scene_spec, generate_scene


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--predictor", default="configs/predictor.json")
    p.add_argument("--drop", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    pts = generate_scene(canonical_scene_spec()).points
    base = PipelineConfig(seed=args.seed)
    model = build_model(base, calibration_cloud(args.seed), args.seed, PredictorNet.load(args.predictor))
    settings = {
        "sp, no filtering": (base.without_filtering(), model),
        "normal 2D norm, no filtering": None,
        f"sp, 2D drop {args.drop}": (replace(base, filter=replace(base.filter, drop_rate=args.drop, apply_layers_3d=())), model),
    }
    dense_cfg = base.without_filtering().with_norm_2d("normal")
    settings["normal 2D norm, no filtering"] = (dense_cfg, with_refit_2d_norms(model, dense_cfg, calibration_cloud(args.seed)))
    for label, (cfg, m) in settings.items():
        print(f"== {label}")
        for name, pre, post in dense_rates(m, pts, cfg):
            print(f"{name:<8}{pre:>10.4f}{post:>10.4f}")


if __name__ == "__main__":
    main()
