"""Datasets, images, heatmap rendering, and result files.

The synthetic-shapes dataset stands in for real imagery: three classes told
apart by morphology (filled disks, concentric rings, scattered blobs) on a
noisy background, generated deterministically from a seed. Images travel as
(H, W) float32 in [0, 1]; PNG/PGM/PPM are the only accepted file formats.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import tensor as T
from .attrib import upsample_bilinear
from .errors import FormatError, ParameterError
from .metrics import MetricsReport

CLASS_NAMES = ("disk", "ring", "scatter")

_ACCEPTED_FORMATS = {"PNG", "PPM"}  # Pillow reports PGM/PPM both as "PPM"

UNDEFINED_COLOR = (0, 0, 139)  # dark blue for masked-out risk pixels


@dataclass(frozen=True)
class Dataset:
    items: tuple[tuple[np.ndarray, int, int], ...]  # (image, label, id)
    class_names: tuple[str, ...]
    resolution: int
    seed: int

    def __len__(self) -> int:
        return len(self.items)

    def images(self) -> np.ndarray:
        return np.stack([img for img, _, _ in self.items])

    def labels(self) -> np.ndarray:
        return np.array([label for _, label, _ in self.items])


# ---------------------------------------------------------------------------
# synthetic shapes


def _disk(img, rng, intensity):
    h = img.shape[0]
    yy, xx = np.mgrid[0:h, 0:h]
    cy, cx = rng.uniform(0.3 * h, 0.7 * h, 2)
    r = h * rng.uniform(0.15, 0.28)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img += intensity * np.clip(r - d, 0.0, 1.0)


def _ring(img, rng, intensity):
    h = img.shape[0]
    yy, xx = np.mgrid[0:h, 0:h]
    cy, cx = rng.uniform(0.35 * h, 0.65 * h, 2)
    r = h * rng.uniform(0.22, 0.32)
    width = max(1.5, r * rng.uniform(0.14, 0.2))
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img += intensity * np.clip(width - np.abs(d - r), 0.0, 1.0)
    inner = r * 0.45
    if inner - width > 3.0:  # second concentric ring only when the gap resolves
        img += intensity * np.clip(width * 0.8 - np.abs(d - inner), 0.0, 1.0)


def _scatter(img, rng, intensity):
    h = img.shape[0]
    yy, xx = np.mgrid[0:h, 0:h]
    for _ in range(int(rng.integers(5, 10))):
        cy, cx = rng.uniform(0.1 * h, 0.9 * h, 2)
        r = h * rng.uniform(0.03, 0.06)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img += intensity * np.clip(r - d, 0.0, 1.0)


_PAINTERS = (_disk, _ring, _scatter)


def _clutter(img, rng):
    """Faint soft blobs shared by every class: background structure that
    keeps maps from being trivially stable without changing the label."""
    h = img.shape[0]
    yy, xx = np.mgrid[0:h, 0:h]
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.05 * h, 0.95 * h, 2)
        r = h * rng.uniform(0.05, 0.1)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img += rng.uniform(0.1, 0.25) * np.clip(1.0 - d / r, 0.0, 1.0)


def gen_synthetic_shapes(classes: int = 3, per_class: int = 50, resolution: int = 64, seed: int = 0) -> Dataset:
    """Balanced shape dataset, a deterministic function of its arguments."""
    if resolution < 32:
        raise ParameterError(f"resolution must be >= 32, got {resolution}")
    if not 2 <= classes <= len(_PAINTERS):
        raise ParameterError(f"classes must be in [2, {len(_PAINTERS)}], got {classes}")
    if per_class < 1:
        raise ParameterError(f"per_class must be >= 1, got {per_class}")
    rng = T.make_rng(seed, 0x5A9E)
    entries = []
    for label in range(classes):
        for _ in range(per_class):
            img = np.full((resolution, resolution), rng.uniform(0.02, 0.12))
            img += rng.normal(0.0, 0.025, (resolution, resolution))
            _clutter(img, rng)
            _PAINTERS[label](img, rng, rng.uniform(0.65, 1.0))
            entries.append((np.clip(img, 0.0, 1.0).astype(T.DTYPE), label))
    order = rng.permutation(len(entries))
    items = tuple((entries[k][0], entries[k][1], i) for i, k in enumerate(order))
    return Dataset(items=items, class_names=CLASS_NAMES[:classes], resolution=resolution, seed=seed)


# ---------------------------------------------------------------------------
# image files


def _atomic_write(path, write_fn):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_image(path, size: int | None = None) -> np.ndarray:
    """Load a PNG/PGM/PPM as grayscale [0, 1], optionally resized bilinearly."""
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in _ACCEPTED_FORMATS:
                raise FormatError(f"unsupported image format {fmt}; use PNG, PGM or PPM")
            arr = np.asarray(im.convert("L"), dtype=T.DTYPE) / 255.0
    except UnidentifiedImageError as err:
        raise FormatError(f"cannot parse image file {path}: {err}") from err
    if size is not None and arr.shape != (size, size):
        arr = upsample_bilinear(arr, size, size).astype(T.DTYPE)
    return arr


def save_image(data, path) -> None:
    """Write an 8-bit PNG from a [0, 1] grayscale array or a HeatmapRender."""
    if isinstance(data, HeatmapRender):
        img = Image.fromarray(data.rgb, mode="RGB")
    else:
        arr = np.asarray(data)
        img = Image.fromarray(np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8), mode="L")
    _atomic_write(path, lambda fh: img.save(fh, format="PNG"))


# ---------------------------------------------------------------------------
# dataset directories: images + labels.csv (id,label)


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for img, label, item_id in dataset.items:
        save_image(img, directory / f"{item_id:05d}.png")
        rows.append((item_id, label))

    def write_labels(fh):
        text = "id,label\n" + "".join(f"{i},{l}\n" for i, l in rows)
        fh.write(text.encode())

    _atomic_write(directory / "labels.csv", write_labels)


def load_dataset(directory, resolution: int | None = None) -> Dataset:
    directory = Path(directory)
    labels_path = directory / "labels.csv"
    if not labels_path.exists():
        raise FormatError(f"{directory} has no labels.csv")
    items = []
    with open(labels_path, newline="") as fh:
        for row in csv.DictReader(fh):
            item_id, label = int(row["id"]), int(row["label"])
            img = load_image(directory / f"{item_id:05d}.png", size=resolution)
            items.append((img, label, item_id))
    if not items:
        raise FormatError(f"{directory} lists no items")
    res = items[0][0].shape[0]
    classes = max(label for _, label, _ in items) + 1
    return Dataset(items=tuple(items), class_names=CLASS_NAMES[:classes], resolution=res, seed=-1)


# ---------------------------------------------------------------------------
# heatmap rendering


def _build_ramp() -> np.ndarray:
    """256 distinct colors, black -> red -> yellow."""
    ramp = np.zeros((256, 3), dtype=np.uint8)
    for i in range(128):
        ramp[i] = (2 * i, 0, 0)
    for i in range(128, 256):
        ramp[i] = (255, int(round((i - 128) * 255 / 127)), 0)
    return ramp


HEAT_RAMP = _build_ramp()


@dataclass(frozen=True)
class HeatmapRender:
    rgb: np.ndarray
    colormap: str = "black-red-yellow"
    alpha: float = 1.0
    scale: tuple[float, float] | None = None  # set when display-normalized


def render_heatmap(
    values: np.ndarray,
    base: np.ndarray | None = None,
    alpha: float = 0.5,
    undefined_mask: np.ndarray | None = None,
) -> HeatmapRender:
    """Colormap a [0, 1] map; optionally alpha-blend over a grayscale base.

    Undefined pixels render dark blue regardless of value.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    values = np.asarray(values, dtype=np.float64)
    if values.min() < -1e-6 or values.max() > 1.0 + 1e-6:
        raise ParameterError("heatmap values must lie in [0, 1]; rescale first")
    idx = np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    rgb = HEAT_RAMP[idx].astype(np.float64)
    effective_alpha = 1.0
    if base is not None:
        gray = np.round(np.clip(np.asarray(base, dtype=np.float64), 0.0, 1.0) * 255)
        rgb = alpha * rgb + (1.0 - alpha) * gray[..., None]
        effective_alpha = alpha
    out = np.round(rgb).astype(np.uint8)
    if undefined_mask is not None:
        out[np.asarray(undefined_mask, dtype=bool)] = UNDEFINED_COLOR
    return HeatmapRender(rgb=out, alpha=effective_alpha)


def render_cv_map(cv: np.ndarray, undefined_mask: np.ndarray, base=None, alpha: float = 0.5) -> HeatmapRender:
    """Risk maps have no fixed scale: min-max normalize for display only and
    record the scale on the render."""
    cv = np.asarray(cv, dtype=np.float64)
    lo, hi = float(cv.min()), float(cv.max())
    display = np.zeros_like(cv) if hi == lo else (cv - lo) / (hi - lo)
    render = render_heatmap(display, base=base, alpha=alpha, undefined_mask=undefined_mask)
    return HeatmapRender(rgb=render.rgb, colormap=render.colormap, alpha=render.alpha, scale=(lo, hi))


# ---------------------------------------------------------------------------
# result files


RESULT_COLUMNS = (
    "architecture",
    "method",
    "mc",
    "coherency",
    "complexity",
    "average_drop",
    "adcc",
    "latency_ms",
    "degenerate_count",
)


def write_results(reports: list[MetricsReport], path, fmt: str = "csv") -> None:
    """Persist evaluation rows; CSV applies the x100 single-decimal display
    convention, JSON keeps full precision and round-trips."""
    if not reports:
        raise ParameterError("no reports to write")
    if fmt not in ("csv", "json"):
        raise ParameterError(f"unknown format {fmt!r}; use csv or json")
    if fmt == "json":
        payload = [
            {
                "architecture": r.architecture,
                "method": r.method,
                "mc": r.mc,
                "coherency": r.coherency,
                "complexity": r.complexity,
                "average_drop": r.average_drop,
                "adcc": r.adcc,
                "latency_ms": r.latency_ms,
                "degenerate_count": r.degenerate_count,
            }
            for r in reports
        ]
        _atomic_write(path, lambda fh: fh.write(json.dumps(payload, indent=2).encode()))
        return

    lines = [",".join(RESULT_COLUMNS)]
    for r in reports:
        lines.append(
            ",".join(
                [
                    r.architecture,
                    r.method,
                    "true" if r.mc else "false",
                    f"{r.coherency * 100:.1f}",
                    f"{r.complexity * 100:.1f}",
                    f"{r.average_drop * 100:.1f}",
                    f"{r.adcc * 100:.1f}",
                    f"{r.latency_ms:.1f}",
                    str(r.degenerate_count),
                ]
            )
        )
    _atomic_write(path, lambda fh: fh.write(("\n".join(lines) + "\n").encode()))


def read_results(path) -> list[MetricsReport]:
    """Load a JSON results file back into reports."""
    with open(path) as fh:
        payload = json.load(fh)
    return [MetricsReport(**row) for row in payload]


def write_json(payload, path) -> None:
    """Atomic pretty-printed JSON dump."""
    _atomic_write(path, lambda fh: fh.write(json.dumps(payload, indent=2).encode()))
