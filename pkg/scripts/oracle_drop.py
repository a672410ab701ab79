"""Change of in-box BEV feature sums under targeted versus uniform voxel dropping.

    python scripts/oracle_drop.py --scenes 300:320 --depth 1
"""

import argparse
import json

import numpy as np

from voxprune.experiments import oracle_drop, scenes
from voxprune.pipeline import PipelineConfig, build_model, calibration_cloud


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenes", default="300:320")
    p.add_argument("--outside", type=float, default=0.7, help="fraction of out-of-box voxels dropped")
    p.add_argument("--uniform", type=float, default=0.3, help="fraction of all voxels dropped")
    p.add_argument("--depth", type=int, default=1, help="3D layers run before summing")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    a, b = (int(v) for v in args.scenes.split(":"))

    cfg = PipelineConfig(seed=args.seed)
    model = build_model(cfg, calibration_cloud(args.seed), args.seed)
    rows = [oracle_drop(model, sc, args.outside, args.uniform, args.depth, seed=i)
            for i, sc in zip(range(a, b), scenes(range(a, b)))]
    rows = np.array(rows)
    print(json.dumps({
        "outside": {"max": rows[:, 0].max(), "mean": rows[:, 0].mean()},
        "uniform": {"min": rows[:, 1].min(), "mean": rows[:, 1].mean()},
    }, indent=2))


if __name__ == "__main__":
    main()
