#!/usr/bin/env python3
"""Train a small model on synthetic shapes and explain one test image.

Writes weights, the four explanation panels (baseline, enhanced, CV risk,
overlay), and prints where everything went.
"""

import argparse
from pathlib import Path

from riskcam import cli, io, model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/quickstart", help="output directory")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--method", default="grad-cam")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = out / "model.rcam"

    report = cli.run_training(
        weights, classes=3, size=args.size, per_class=60, epochs=12, lr=0.01, seed=args.seed,
        dataset_out=out / "data",
    )
    print(f"train accuracy {report['train_accuracy']:.3f}, holdout {report['holdout_accuracy']:.3f}")

    trained = model.load_model(weights)
    test = io.load_dataset(out / "data" / "test", resolution=args.size)
    image = test.items[0][0]
    stats = cli.run_explain(trained, image, args.method, out / "maps", passes=10, seed=7)
    print(f"maps in {out / 'maps'}; undefined-risk fraction {stats['undefined_fraction']:.3f}")


if __name__ == "__main__":
    main()
