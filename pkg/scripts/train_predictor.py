"""Train the predictor shipped with configs/default.json (writes configs/predictor.json).

    python scripts/train_predictor.py [--epochs 10] [--scenes 20]
"""

import sys

from voxprune.cli import main

if __name__ == "__main__":
    sys.exit(main(["train-predictor", "configs/default.json"] + sys.argv[1:]))
