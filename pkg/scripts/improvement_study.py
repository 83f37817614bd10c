#!/usr/bin/env python3
"""Single-pass baseline vs MC pipeline across dataset seeds.

For each dataset seed: generate shapes, train the default model, evaluate
the chosen methods with and without the MC pipeline over held-out images,
and print the per-seed aggregate ADCC direction.
"""

import argparse
import logging

import numpy as np

from riskcam import attrib, cli, io, metrics, model, risk


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--methods", default="grad-cam,recipro-cam")
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--per-class", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--images", type=int, default=50)
    ap.add_argument("--T", type=int, default=10, dest="passes")
    args = ap.parse_args()
    logging.disable(logging.WARNING)

    methods = args.methods.split(",")
    wins = {m: 0 for m in methods}
    for seed in range(args.seeds):
        train = io.gen_synthetic_shapes(per_class=args.per_class, resolution=args.size, seed=1000 + seed)
        test = io.gen_synthetic_shapes(per_class=17, resolution=args.size, seed=91000 + seed)
        net = model.build_default_model(classes=3, input_size=args.size, seed=seed)
        store, _ = model.train_toy(net, train.items, epochs=args.epochs, lr=0.01, seed=seed, batch_size=8)
        trained = model.Model(net.spec, store)
        acc = model.evaluate_accuracy(trained, test.items)
        images = [img for img, _, _ in test.items[: args.images]]
        rows = cli.run_evaluation(trained, images, methods, passes=args.passes, seed=7,
                                  latency_runs=1, warmup_runs=0)
        by = {(r.method, r.mc): r for r in rows}
        line = [f"seed {seed} (holdout {acc:.2f})"]
        for m in methods:
            orig, prop = by[(m, False)].adcc * 100, by[(m, True)].adcc * 100
            wins[m] += prop >= orig
            line.append(f"{m}: {orig:.1f} -> {prop:.1f} {'UP' if prop >= orig else 'DOWN'}")
        print("  ".join(line), flush=True)

    for m in methods:
        print(f"{m}: MC pipeline improved aggregate ADCC in {wins[m]}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
