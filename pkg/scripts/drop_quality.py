"""Train the predictor on one set of random scenes and compare drop quality on another.

    python scripts/drop_quality.py --train 100:120 --test 200:220 --out predictor.json
"""

import argparse
import json
import time

from voxprune.experiments import drop_quality, scenes, train_on_scenes
from voxprune.pipeline import PipelineConfig, build_model, calibration_cloud
from voxprune.predictor import PredictorNet


def seed_range(s):
    a, b = s.split(":")
    return range(int(a), int(b))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--train", type=seed_range, default=seed_range("100:120"))
    p.add_argument("--test", type=seed_range, default=seed_range("200:220"))
    p.add_argument("--points", default="3d.1,3d.3", help="filter points used for training")
    p.add_argument("--eval-point", default="3d.1")
    p.add_argument("--drop", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--activation", default="softplus", choices=["softplus", "relu", "identity"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="save trained weights here")
    args = p.parse_args()

    cfg = PipelineConfig(seed=args.seed)
    model = build_model(cfg, calibration_cloud(args.seed), args.seed)
    t0 = time.time()
    net = PredictorNet.create(seed=args.seed, activation=args.activation)
    run = train_on_scenes(model, scenes(args.train), args.points.split(","), args.epochs, args.lr,
                          seed=args.seed, net=net)
    t1 = time.time()
    if args.out:
        run.net.save(args.out)
    model.predictor = run.net
    quality = drop_quality(model, scenes(args.test), args.eval_point, args.drop, seed=args.seed)
    print(json.dumps({
        "initial_mse": run.initial_mse,
        "final_mse": run.final_mse,
        "reduction": run.initial_mse / run.final_mse,
        "epoch_loss": run.epoch_loss,
        "train_seconds": round(t1 - t0, 1),
        "r_inbox": quality,
    }, indent=2))


if __name__ == "__main__":
    main()
