#!/usr/bin/env python3
"""Sweep the number of MC passes and report mean ADCC per pass count.

Trains a fresh model, then reuses the `tstudy` machinery to produce the
pass-count table and its Spearman rank correlation.
"""

import argparse
import logging
from pathlib import Path

from riskcam import cli, io, model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/tstudy")
    ap.add_argument("--method", default="grad-cam")
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--Ts", default="1,2,5,10,20", dest="pass_list")
    ap.add_argument("--images", type=int, default=20)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    logging.disable(logging.WARNING)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = io.gen_synthetic_shapes(per_class=40, resolution=args.size, seed=1000 + args.seed)
    test = io.gen_synthetic_shapes(per_class=17, resolution=args.size, seed=91000 + args.seed)
    net = model.build_default_model(classes=3, input_size=args.size, seed=args.seed)
    store, _ = model.train_toy(net, train.items, epochs=6, lr=0.01, seed=args.seed, batch_size=8)
    trained = model.Model(net.spec, store)

    images = [img for img, _, _ in test.items[: args.images]]
    pass_counts = [int(t) for t in args.pass_list.split(",")]
    rows, spearman = cli.run_t_study(trained, images, args.method, pass_counts, seed=7)
    for r in rows:
        print(f"T={r['passes']:>3}  ADCC={r['adcc'] * 100:5.1f}  total={r['total_latency_ms']:8.1f} ms")
    print(f"spearman(T, ADCC) = {spearman:.3f}")
    cli._write_tstudy_csv(rows, spearman, out / "tstudy.csv")
    print(f"wrote {out / 'tstudy.csv'}")


if __name__ == "__main__":
    main()
