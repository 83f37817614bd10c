"""Command-line front end: train, explain one image, run the ADCC-vs-latency
evaluation, and sweep the pass count.

The orchestration functions (run_*) are plain library calls so experiments
and tests can drive them without a subprocess; the argparse layer only
parses flags and reports errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import attrib as A
from . import io as IO
from . import metrics as X
from . import model as M
from . import risk as R
from .errors import RiskcamError

logger = logging.getLogger(__name__)

ACCURACY_FLOOR = 0.8
HOLDOUT_SEED_OFFSET = 10_000


# ---------------------------------------------------------------------------
# orchestration


def run_training(
    out_path,
    classes: int = 3,
    size: int = 64,
    per_class: int = 500,
    epochs: int = 20,
    lr: float = 0.01,
    seed: int = 1,
    dataset_out=None,
) -> dict:
    """Generate shapes, train the default model, persist weights + report."""
    train_ds = IO.gen_synthetic_shapes(classes=classes, per_class=per_class, resolution=size, seed=seed)
    holdout_ds = IO.gen_synthetic_shapes(
        classes=classes, per_class=max(1, per_class // 5), resolution=size, seed=seed + HOLDOUT_SEED_OFFSET
    )
    model = M.build_default_model(classes=classes, input_size=size, seed=seed)
    store, history = M.train_toy(model, train_ds.items, epochs=epochs, lr=lr, seed=seed)
    trained = M.Model(model.spec, store)
    train_acc = M.evaluate_accuracy(trained, train_ds.items)
    holdout_acc = M.evaluate_accuracy(trained, holdout_ds.items)

    M.save_weights(store, out_path)
    if dataset_out is not None:
        IO.save_dataset(train_ds, Path(dataset_out) / "train")
        IO.save_dataset(holdout_ds, Path(dataset_out) / "test")
    report = {
        "weights": str(out_path),
        "classes": classes,
        "input_size": size,
        "per_class": per_class,
        "epochs": epochs,
        "lr": lr,
        "seed": seed,
        "loss_history": history,
        "train_accuracy": train_acc,
        "holdout_accuracy": holdout_acc,
    }
    IO.write_json(report, str(out_path) + ".train.json")
    return report


def _map_stats(values: np.ndarray) -> dict:
    return {"min": float(values.min()), "max": float(values.max()), "mean": float(values.mean())}


def run_explain(
    model: M.Model,
    image: np.ndarray,
    method: str,
    out_dir,
    passes: int = 10,
    seed: int = 7,
    layer: int | None = None,
    alpha: float = 0.5,
    dropout_enabled: bool = True,
    target_class: int | None = None,
) -> dict:
    """Write the four-panel explanation (baseline, enhanced, risk, overlay)
    plus a JSON with per-map statistics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layer = model.spec.last_conv_layer if layer is None else layer
    cfg = R.RiskConfig(
        method=A.AttributionConfig(method),
        num_passes=passes,
        base_seed=seed,
        layer=layer,
        target_class=target_class,
        dropout_mode="mc-enabled" if dropout_enabled else "disabled",
    )
    pred, _ = M.predict(model, image, "disabled")
    baseline_class = pred.label if target_class is None else target_class
    baseline = A.compute_map(model, image, cfg.method, layer, baseline_class, "disabled", seed)
    enhanced, result = R.explain_with_risk(model, image, cfg)

    IO.save_image(IO.render_heatmap(baseline.values), out_dir / "baseline.png")
    IO.save_image(IO.render_heatmap(enhanced.values), out_dir / "enhanced.png")
    IO.save_image(IO.render_cv_map(result.cv, result.undefined_mask), out_dir / "risk_cv.png")
    IO.save_image(IO.render_heatmap(enhanced.values, base=image, alpha=alpha), out_dir / "overlay.png")

    stats = {
        "method": method,
        "passes": passes,
        "seed": seed,
        "layer": layer,
        "predicted_class": pred.label,
        "target_class": baseline_class if target_class is not None else None,
        "baseline_map": _map_stats(baseline.values),
        "enhanced_map": _map_stats(enhanced.values),
        "cv_map": _map_stats(result.cv),
        "undefined_fraction": float(result.undefined_mask.mean()),
    }
    IO.write_json(stats, out_dir / "stats.json")
    return stats


def _evaluate_images(model, images, config, mc, architecture, latency_runs, warmup_runs, workers):
    def one(img):
        return X.evaluate_method(
            model, img, config, mc,
            architecture=architecture, latency_runs=latency_runs, warmup_runs=warmup_runs,
        )

    n = R.worker_count(workers)
    if n > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(one, images))
    return [one(img) for img in images]


def run_evaluation(
    model: M.Model,
    images: list[np.ndarray],
    methods: list[str],
    passes: int = 10,
    seed: int = 7,
    layer: int | None = None,
    latency_runs: int = 5,
    warmup_runs: int = 1,
    architecture: str = "default-cnn",
    workers: int | None = None,
) -> list[X.MetricsReport]:
    """One aggregate row per method x {original, proposed} over the images."""
    rows = []
    for method in methods:
        cfg = R.RiskConfig(method=A.AttributionConfig(method), num_passes=passes, base_seed=seed, layer=layer)
        for mc in (False, True):
            reports = _evaluate_images(model, images, cfg, mc, architecture, latency_runs, warmup_runs, workers)
            rows.append(X.aggregate_reports(reports))
    return rows


def run_t_study(
    model: M.Model,
    images: list[np.ndarray],
    method: str,
    pass_counts: list[int],
    seed: int = 7,
    layer: int | None = None,
    architecture: str = "default-cnn",
    workers: int | None = None,
) -> tuple[list[dict], float]:
    """Mean ADCC and total latency per pass count, plus the Spearman rank
    correlation between pass count and ADCC."""
    rows = []
    for passes in pass_counts:
        cfg = R.RiskConfig(method=A.AttributionConfig(method), num_passes=passes, base_seed=seed, layer=layer)
        reports = _evaluate_images(model, images, cfg, True, architecture, latency_runs=1, warmup_runs=0, workers=workers)
        agg = X.aggregate_reports(reports)
        rows.append(
            {
                "passes": passes,
                "adcc": agg.adcc,
                "total_latency_ms": float(sum(r.latency_ms for r in reports)),
                "degenerate_count": agg.degenerate_count,
            }
        )
    if len(rows) > 1:
        spearman = float(sps.spearmanr([r["passes"] for r in rows], [r["adcc"] for r in rows]).statistic)
    else:
        spearman = float("nan")
    return rows, spearman


def _write_tstudy_csv(rows, spearman, path):
    lines = ["T,adcc,total_latency_ms,degenerate_count"]
    for r in rows:
        lines.append(f"{r['passes']},{r['adcc'] * 100:.1f},{r['total_latency_ms']:.1f},{r['degenerate_count']}")
    Path(path).write_text("\n".join(lines) + "\n")
    IO.write_json({"rows": rows, "spearman": spearman}, str(path) + ".json")


def _load_eval_images(dataset_path, resolution, limit):
    root = Path(dataset_path)
    ds = IO.load_dataset(root / "test" if (root / "test").is_dir() else root, resolution=resolution)
    return [img for img, _, _ in ds.items[:limit]]


# ---------------------------------------------------------------------------
# argparse layer


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskcam", description="Risk-aware pixel attribution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the default CNN on synthetic shapes")
    p.add_argument("--out", required=True, help="output weight file (.rcam)")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--dataset-out", default=None, help="also persist train/test splits here")

    p = sub.add_parser("explain", help="explain one image with risk maps")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", default="grad-cam", choices=A.METHODS)
    p.add_argument("--T", type=int, default=10, dest="passes")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--class", type=int, default=None, dest="target_class")
    p.add_argument("--no-dropout", action="store_true", help="disable test-time dropout in the pipeline")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="ADCC vs latency study over a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True, help="dataset directory (test/ subdir used when present)")
    p.add_argument("--methods", default="all", help='"all" or comma-separated method names')
    p.add_argument("--T", type=int, default=10, dest="passes")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--format", default=None, choices=("csv", "json"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("tstudy", help="sweep the MC pass count")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", default="grad-cam", choices=A.METHODS)
    p.add_argument("--Ts", default="1,2,3,4,5,6,7,8,9,10,20", dest="pass_list")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--out", required=True)
    return parser


def _cmd_train(args) -> int:
    report = run_training(
        args.out,
        classes=args.classes,
        size=args.size,
        per_class=args.per_class,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        dataset_out=args.dataset_out,
    )
    print(
        f"trained {args.epochs} epochs: train accuracy {report['train_accuracy']:.3f}, "
        f"holdout accuracy {report['holdout_accuracy']:.3f}"
    )
    if report["train_accuracy"] < ACCURACY_FLOOR:
        print(f"error: training accuracy {report['train_accuracy']:.3f} below floor {ACCURACY_FLOOR}", file=sys.stderr)
        return 1
    return 0


def _cmd_explain(args) -> int:
    model = M.load_model(args.weights)
    image = IO.load_image(args.image, size=model.spec.input_size)
    stats = run_explain(
        model,
        image,
        args.method,
        args.out,
        passes=args.passes,
        seed=args.seed,
        layer=args.layer,
        alpha=args.alpha,
        dropout_enabled=not args.no_dropout,
        target_class=args.target_class,
    )
    print(f"wrote 4 maps to {args.out} (undefined fraction {stats['undefined_fraction']:.3f})")
    return 0


def _cmd_evaluate(args) -> int:
    model = M.load_model(args.weights)
    methods = list(A.METHODS) if args.methods == "all" else [m.strip() for m in args.methods.split(",")]
    for m in methods:
        if m not in A.METHODS:
            raise RiskcamError(f"unknown method {m!r}; choose from {', '.join(A.METHODS)}")
    images = _load_eval_images(args.dataset, model.spec.input_size, args.limit)
    rows = run_evaluation(
        model,
        images,
        methods,
        passes=args.passes,
        seed=args.seed,
        layer=args.layer,
        architecture=f"default-cnn{model.spec.input_size}",
    )
    fmt = args.format or ("json" if str(args.out).endswith(".json") else "csv")
    IO.write_results(rows, args.out, fmt=fmt)
    print(f"wrote {len(rows)} rows over {len(images)} images to {args.out}")
    return 0


def _cmd_tstudy(args) -> int:
    model = M.load_model(args.weights)
    pass_counts = [int(t) for t in args.pass_list.split(",") if t.strip()]
    images = _load_eval_images(args.dataset, model.spec.input_size, args.limit)
    rows, spearman = run_t_study(
        model,
        images,
        args.method,
        pass_counts,
        seed=args.seed,
        layer=args.layer,
        architecture=f"default-cnn{model.spec.input_size}",
    )
    _write_tstudy_csv(rows, spearman, args.out)
    print(f"spearman(T, adcc) = {spearman:.4f} over {len(rows)} rows -> {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "explain": _cmd_explain,
    "evaluate": _cmd_evaluate,
    "tstudy": _cmd_tstudy,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (RiskcamError, OSError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
