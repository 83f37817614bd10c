"""Risk-aware attribution: MC-dropout map volumes, expectation and CV maps.

The pipeline runs the attribution method T times with test-time dropout
enabled (one seeded mask set per pass), stacks the per-pass saliency maps
into a volume, and reduces it per pixel: the mean gives the enhanced map,
and the coefficient of variation std/mean scores how much each pixel's
attribution can be trusted. Pixels whose expectation is below epsilon get a
zero CV and are flagged undefined instead of dividing by almost-zero.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import attrib as A
from . import model as M
from . import tensor as T
from .errors import DimensionError, ParameterError

DEFAULT_PASSES = 10
DEFAULT_EPSILON = 1e-6


def worker_count(requested: int | None = None) -> int:
    """Resolve a worker count; RISKCAM_THREADS caps/defaults it."""
    env = os.environ.get("RISKCAM_THREADS")
    cap = max(1, int(env)) if env else 1
    if requested is None:
        return cap
    return max(1, min(requested, cap)) if env else max(1, requested)


@dataclass(frozen=True)
class RiskConfig:
    """How to build a PA volume: method, pass count, seeding, class policy."""

    method: A.AttributionConfig
    num_passes: int = DEFAULT_PASSES
    base_seed: int = 0
    epsilon: float = DEFAULT_EPSILON
    layer: int | None = None
    target_class: int | None = None  # None: argmax of each pass's own logits
    dropout_mode: str = "mc-enabled"

    def __post_init__(self):
        if self.num_passes < 1:
            raise ParameterError(f"num_passes must be >= 1, got {self.num_passes}")
        if self.epsilon <= 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.dropout_mode not in T.DROPOUT_MODES:
            raise ParameterError(f"unknown dropout mode {self.dropout_mode!r}")


@dataclass(frozen=True)
class PAVolume:
    """T same-shape saliency maps with their per-slice seeds and classes."""

    maps: tuple[A.SaliencyMap, ...]
    seeds: tuple[int, ...]
    classes: tuple[int, ...]
    method: str

    def __post_init__(self):
        if len(self.maps) < 1:
            raise ParameterError("a PA volume needs at least one slice")
        shape = self.maps[0].values.shape
        for m in self.maps:
            if m.values.shape != shape:
                raise DimensionError(f"slice shape {m.values.shape} differs from {shape}")
            if m.values.min() < 0.0 or m.values.max() > 1.0:
                raise ParameterError("volume slices must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.maps)

    def stack(self) -> np.ndarray:
        return np.stack([m.values for m in self.maps])


@dataclass(frozen=True)
class RiskResult:
    """Per-pixel statistics of a PA volume."""

    expectation: np.ndarray
    variance: np.ndarray
    cv: np.ndarray
    undefined_mask: np.ndarray
    num_passes: int
    epsilon: float


def _as_stack(volume) -> np.ndarray:
    stack = volume.stack() if isinstance(volume, PAVolume) else np.asarray(volume)
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise DimensionError(f"expected a (T, H, W) volume, got shape {stack.shape}")
    return stack


def expectation_map(volume) -> np.ndarray:
    """Per-pixel arithmetic mean over the pass axis."""
    stack = _as_stack(volume)
    return stack.mean(axis=0, dtype=np.float64).astype(T.DTYPE)


def variance_map(volume) -> np.ndarray:
    """Per-pixel population variance, mean-of-squares minus squared mean.

    Accumulation runs in float64 so the one-pass form agrees with a two-pass
    oracle well below 1e-6; rounding negatives clamp to zero.
    """
    stack = _as_stack(volume).astype(np.float64)
    mean = stack.mean(axis=0)
    var = (stack * stack).mean(axis=0) - mean * mean
    return np.maximum(var, 0.0).astype(T.DTYPE)


def cv_map(expectation: np.ndarray, variance: np.ndarray, epsilon: float = DEFAULT_EPSILON):
    """Coefficient of variation sqrt(var)/mean with a guarded denominator.

    Returns (cv, undefined_mask): wherever the expectation falls below
    epsilon the ratio is meaningless, so cv is set to 0 and the mask is set.
    """
    if epsilon <= 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    expectation = np.asarray(expectation)
    variance = np.asarray(variance)
    if expectation.shape != variance.shape:
        raise DimensionError(f"shape mismatch {expectation.shape} vs {variance.shape}")
    if variance.min() < 0:
        raise ParameterError("variance must be nonnegative")
    undefined = expectation < epsilon
    safe = np.where(undefined, 1.0, expectation).astype(np.float64)
    cv = np.sqrt(variance.astype(np.float64)) / safe
    cv[undefined] = 0.0
    return cv.astype(T.DTYPE), undefined


def pa_volume(model: M.Model, image: np.ndarray, config: RiskConfig, workers: int | None = None) -> PAVolume:
    """Build the volume: pass t uses seed base_seed + t and its own dropout
    masks; the target class per pass follows the config's class policy.

    Slices are independent given their seeds, so they may be computed in
    parallel; results are reduced in slice order and identical to a
    sequential run.
    """
    spec = model.spec
    if not any(l.kind == "dropout" for l in spec.layers):
        raise ParameterError("model has no dropout layer to sample from")
    layer = spec.last_conv_layer if config.layer is None else config.layer
    if spec.layers[layer].kind != "conv":
        raise ParameterError(f"layer {layer} is not a conv layer")
    seeds = tuple(config.base_seed + t for t in range(1, config.num_passes + 1))

    def one_slice(seed: int) -> tuple[A.SaliencyMap, int]:
        if config.target_class is None:
            pred, _ = M.predict(model, image, config.dropout_mode, seed)
            target = pred.label
        else:
            target = config.target_class
        sal = A.compute_map(model, image, config.method, layer, target, config.dropout_mode, seed)
        return sal, target

    n = worker_count(workers)
    if n > 1 and config.num_passes > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(one_slice, seeds))
    else:
        results = [one_slice(s) for s in seeds]
    maps = tuple(r[0] for r in results)
    classes = tuple(r[1] for r in results)
    return PAVolume(maps=maps, seeds=seeds, classes=classes, method=config.method.method)


def explain_with_risk(
    model: M.Model, image: np.ndarray, config: RiskConfig, workers: int | None = None
) -> tuple[A.SaliencyMap, RiskResult]:
    """Enhanced saliency map plus its per-pixel risk statistics.

    The enhanced map is the re-normalized per-pixel expectation of the
    volume; the risk statistics (variance, CV, undefined mask) are computed
    on the raw expectation before re-normalization.
    """
    volume = pa_volume(model, image, config, workers=workers)
    expectation = expectation_map(volume)
    variance = variance_map(volume)
    cv, undefined = cv_map(expectation, variance, config.epsilon)
    counts = np.bincount(np.asarray(volume.classes))
    enhanced = A.SaliencyMap(
        values=A.normalize_map(expectation),
        method=volume.method,
        target_class=int(np.argmax(counts)),
    )
    result = RiskResult(
        expectation=expectation,
        variance=variance,
        cv=cv,
        undefined_mask=undefined,
        num_passes=config.num_passes,
        epsilon=config.epsilon,
    )
    return enhanced, result
