"""Saliency evaluation: AverageDrop, Coherency, Complexity, ADCC, latency.

All metrics live in [0, 1] internally; the x100 display scaling happens only
at the reporting boundary. "Score" always means the model's softmax
probability for the target class, taken with dropout disabled so the metric
grades the map rather than a particular perturbation.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, replace
from statistics import median

import numpy as np

from . import attrib as A
from . import model as M
from . import risk as R
from . import tensor as T
from .errors import CoherencyUndefinedError, DimensionError, DomainError

logger = logging.getLogger(__name__)

_LATENCY_LOCK = threading.Lock()  # timed sections stay single-threaded


@dataclass(frozen=True)
class MetricsReport:
    """One evaluation row: either a single image or an aggregate."""

    architecture: str
    method: str
    mc: bool
    coherency: float
    complexity: float
    average_drop: float
    adcc: float
    latency_ms: float
    degenerate_count: int = 0

    def __post_init__(self):
        for name in ("coherency", "complexity", "average_drop", "adcc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name}={v} outside [0, 1]")


def masked_input(image: np.ndarray, sal: A.SaliencyMap) -> np.ndarray:
    """X * S with the map broadcast over channels."""
    image = np.asarray(image)
    hw = image.shape[-2:]
    if sal.values.shape != hw:
        raise DimensionError(f"map shape {sal.values.shape} does not match image {hw}")
    return (image * sal.values).astype(image.dtype)


def average_drop(score_full: float, score_masked: float) -> float:
    """Relative decrease of the class score under masking, clamped at 0."""
    if score_full <= 0:
        raise DomainError(f"score_full must be > 0, got {score_full}")
    return max(0.0, score_full - score_masked) / score_full


def coherency(map_on_masked: A.SaliencyMap, map_on_full: A.SaliencyMap) -> float:
    """Pearson correlation of the two maps, rescaled from [-1, 1] to [0, 1]."""
    a = np.asarray(map_on_masked.values, dtype=np.float64).ravel()
    b = np.asarray(map_on_full.values, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"map shapes differ: {map_on_masked.values.shape} vs {map_on_full.values.shape}")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0.0:
        raise CoherencyUndefinedError("Pearson correlation is undefined for a constant map")
    r = float(np.clip((ac * bc).sum() / denom, -1.0, 1.0))
    return (r + 1.0) / 2.0


def complexity(sal: A.SaliencyMap) -> float:
    """L1 mass of the map normalized by pixel count."""
    return float(np.abs(sal.values).mean())


def adcc(coherency_value: float, complexity_value: float, average_drop_value: float) -> float:
    """Harmonic mean of coherency, 1 - complexity, and 1 - average drop."""
    if coherency_value <= 0:
        raise DomainError(f"coherency must be > 0, got {coherency_value}")
    if complexity_value >= 1:
        raise DomainError(f"complexity must be < 1, got {complexity_value}")
    if average_drop_value >= 1:
        raise DomainError(f"average drop must be < 1, got {average_drop_value}")
    return 3.0 / (1.0 / coherency_value + 1.0 / (1.0 - complexity_value) + 1.0 / (1.0 - average_drop_value))


# ---------------------------------------------------------------------------
# the per-image evaluation protocol


def _class_score(model: M.Model, image: np.ndarray, target: int) -> float:
    pred, _ = M.predict(model, image, "disabled")
    return float(pred.probabilities[target])


def evaluate_method(
    model: M.Model,
    image: np.ndarray,
    config: R.RiskConfig,
    mc: bool,
    *,
    architecture: str = "default-cnn",
    latency_runs: int = 5,
    warmup_runs: int = 1,
) -> MetricsReport:
    """Full metric protocol for one (method, image) pair.

    mc=False computes a single-pass map with dropout disabled; mc=True runs
    the MC pipeline as configured. The target class is fixed to the
    deterministic prediction so all metrics are class-conditional, and the
    coherency re-run applies the identical pipeline to the masked image.
    Latency is the median wall-clock time of the map computation over
    ``latency_runs`` timed runs after ``warmup_runs`` warm-ups.
    """
    pred, _ = M.predict(model, image, "disabled")
    target = pred.label if config.target_class is None else config.target_class
    layer = model.spec.last_conv_layer if config.layer is None else config.layer
    eval_config = replace(config, target_class=target, layer=layer)

    if mc:
        def compute(img):
            enhanced, _ = R.explain_with_risk(model, img, eval_config)
            return enhanced
    else:
        def compute(img):
            return A.compute_map(model, img, eval_config.method, layer, target, "disabled", eval_config.base_seed)

    with _LATENCY_LOCK:
        for _ in range(warmup_runs):
            compute(image)
        times = []
        for _ in range(max(1, latency_runs)):
            t0 = time.perf_counter()
            sal = compute(image)
            times.append((time.perf_counter() - t0) * 1000.0)
    latency_ms = median(times)

    degenerate = 0
    masked = masked_input(image, sal)
    score_full = _class_score(model, image, target)
    score_masked = _class_score(model, masked, target)
    ad = average_drop(score_full, score_masked)
    comp = complexity(sal)
    try:
        coh = coherency(compute(masked), sal)
    except CoherencyUndefinedError:
        logger.warning("constant map made coherency undefined (%s, mc=%s); substituting 0", config.method.method, mc)
        coh = 0.0
        degenerate = 1
    try:
        score = adcc(coh, comp, ad)
    except DomainError as err:
        logger.warning("ADCC undefined (%s, mc=%s): %s; substituting 0", config.method.method, mc, err)
        score = 0.0
        degenerate = 1

    return MetricsReport(
        architecture=architecture,
        method=config.method.method,
        mc=mc,
        coherency=coh,
        complexity=comp,
        average_drop=ad,
        adcc=score,
        latency_ms=latency_ms,
        degenerate_count=degenerate,
    )


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Mean the per-image components; ADCC is recomputed from the means so
    the aggregate row stays internally consistent."""
    if not reports:
        raise DomainError("nothing to aggregate")
    first = reports[0]
    coh = float(np.mean([r.coherency for r in reports]))
    comp = float(np.mean([r.complexity for r in reports]))
    ad = float(np.mean([r.average_drop for r in reports]))
    try:
        score = adcc(coh, comp, ad)
    except DomainError:
        score = 0.0
    return MetricsReport(
        architecture=first.architecture,
        method=first.method,
        mc=first.mc,
        coherency=coh,
        complexity=comp,
        average_drop=ad,
        adcc=score,
        latency_ms=float(np.mean([r.latency_ms for r in reports])),
        degenerate_count=sum(r.degenerate_count for r in reports),
    )
