"""Pixel-attribution methods over a recorded forward pass.

Five CAM-family methods produce a saliency map at input resolution for a
target class: Grad-CAM and Grad-CAM++ read gradients of the class logit at a
chosen conv layer; SmoothGrad-CAM++ averages the Grad-CAM++ gradient powers
over noisy inputs; Score-CAM and Recipro-CAM are forward-only, scoring
channel masks and single-position spatial masks respectively by the class
probability they retain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .errors import GraphError, ParameterError

METHODS = ("grad-cam", "grad-cam++", "smooth-grad-cam++", "score-cam", "recipro-cam")

SMOOTH_DEFAULT_SAMPLES = 5
SMOOTH_DEFAULT_SIGMA = 0.1

_ALPHA_EPS = 1e-8
_NOISE_TAG = 0x5E0D


@dataclass(frozen=True)
class SaliencyMap:
    """Single-channel attribution map in [0, 1] at input resolution."""

    values: np.ndarray
    method: str
    target_class: int
    normalized: bool = True


@dataclass(frozen=True)
class AttributionConfig:
    """A method choice plus its per-method parameters."""

    method: str
    smooth_samples: int = SMOOTH_DEFAULT_SAMPLES
    smooth_sigma: float = SMOOTH_DEFAULT_SIGMA

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; choose one of {', '.join(METHODS)}")
        if self.smooth_samples < 1:
            raise ParameterError(f"smooth_samples must be >= 1, got {self.smooth_samples}")
        if self.smooth_sigma < 0:
            raise ParameterError(f"smooth_sigma must be >= 0, got {self.smooth_sigma}")


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant map collapses to all zeros."""
    raw = np.asarray(raw, dtype=T.DTYPE)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def upsample_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner alignment; constants stay constant."""
    grid = np.asarray(grid)
    h, w = grid.shape
    rows = np.arange(out_h) * ((h - 1) / (out_h - 1) if out_h > 1 else 0.0)
    cols = np.arange(out_w) * ((w - 1) / (out_w - 1) if out_w > 1 else 0.0)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0).astype(grid.dtype)[:, None]
    fc = (cols - c0).astype(grid.dtype)[None, :]
    top = grid[r0[:, None], c0[None, :]] * (1 - fc) + grid[r0[:, None], c1[None, :]] * fc
    bot = grid[r1[:, None], c0[None, :]] * (1 - fc) + grid[r1[:, None], c1[None, :]] * fc
    return top * (1 - fr) + bot * fr


def _layer_activation(graph: T.Graph, layer: int) -> np.ndarray:
    key = ("layer", layer)
    if key not in graph.marks:
        raise GraphError(f"graph has no recorded activation for layer {layer}")
    act = graph.activation(graph.marks[key])
    if act.ndim != 4:
        raise GraphError(f"layer {layer} activation has shape {act.shape}, expected a conv output")
    return act


def _input_resolution(graph: T.Graph) -> tuple[int, int]:
    if "input" not in graph.marks:
        raise GraphError("graph does not mark its input image")
    shape = graph.activation(graph.marks["input"]).shape
    return shape[-2], shape[-1]


def _finish(raw: np.ndarray, graph: T.Graph, method: str, target_class: int) -> SaliencyMap:
    out_h, out_w = _input_resolution(graph)
    values = normalize_map(upsample_bilinear(raw, out_h, out_w))
    return SaliencyMap(values=values, method=method, target_class=int(target_class))


# ---------------------------------------------------------------------------
# gradient-based methods


def grad_cam(graph: T.Graph, layer: int, target_class: int) -> SaliencyMap:
    """Channel weights are the spatial mean of the class-logit gradient."""
    acts = _layer_activation(graph, layer)
    grads = T.backward(graph, target_class, graph.marks[("layer", layer)]).data
    weights = grads.mean(axis=(2, 3), keepdims=True)
    raw = np.maximum((weights * acts).sum(axis=1), 0.0)[0]
    return _finish(raw, graph, "grad-cam", target_class)


def _grad_cam_pp_raw(acts: np.ndarray, d1: np.ndarray, d2: np.ndarray, d3: np.ndarray) -> np.ndarray:
    """Shared Grad-CAM++ map assembly from first/second/third gradient powers."""
    sum_acts = acts.sum(axis=(2, 3), keepdims=True)
    denom = 2.0 * d2 + sum_acts * d3
    safe = np.where(denom > _ALPHA_EPS, denom, 1.0)
    alpha = np.where(denom > _ALPHA_EPS, d2 / safe, 0.0)
    weights = (alpha * np.maximum(d1, 0.0)).sum(axis=(2, 3), keepdims=True)
    return np.maximum((weights * acts).sum(axis=1), 0.0)[0]


def grad_cam_pp(graph: T.Graph, layer: int, target_class: int) -> SaliencyMap:
    """Grad-CAM++ under the exponential-output convention: the second and
    third derivatives reduce to powers of the first."""
    acts = _layer_activation(graph, layer)
    g = T.backward(graph, target_class, graph.marks[("layer", layer)]).data
    raw = _grad_cam_pp_raw(acts, g, g * g, g * g * g)
    return _finish(raw, graph, "grad-cam++", target_class)


def smooth_grad_cam_pp(
    model: M.Model,
    image: np.ndarray,
    layer: int,
    target_class: int,
    samples: int = SMOOTH_DEFAULT_SAMPLES,
    sigma_rel: float = SMOOTH_DEFAULT_SIGMA,
    seed: int = 0,
    dropout_mode: str = "disabled",
) -> SaliencyMap:
    """Average the Grad-CAM++ gradient powers over noisy copies of the input.

    Noise is Gaussian with std sigma_rel * (max(X) - min(X)). With
    samples=1 and sigma_rel=0 this reduces exactly to grad_cam_pp. All
    passes share one dropout seed, so in MC mode they see the same
    perturbed network.
    """
    if samples < 1:
        raise ParameterError(f"samples must be >= 1, got {samples}")
    if sigma_rel < 0:
        raise ParameterError(f"sigma_rel must be >= 0, got {sigma_rel}")
    batch = M.to_input_batch(image, model.spec)
    _, clean_graph = M.predict(model, batch[0], dropout_mode, seed)
    acts = _layer_activation(clean_graph, layer)
    sigma = float(sigma_rel * (batch.max() - batch.min()))

    g_list = []
    for i in range(samples):
        if sigma == 0.0:
            graph = clean_graph
        else:
            noise = T.make_rng(seed, _NOISE_TAG, i).normal(0.0, sigma, batch.shape).astype(batch.dtype)
            _, graph = M.predict(model, (batch + noise)[0], dropout_mode, seed)
        g_list.append(T.backward(graph, target_class, graph.marks[("layer", layer)]).data)
    stack = np.stack(g_list)
    d1 = stack.mean(axis=0)
    d2 = (stack * stack).mean(axis=0)
    d3 = (stack * stack * stack).mean(axis=0)
    raw = _grad_cam_pp_raw(acts, d1, d2, d3)
    return _finish(raw, clean_graph, "smooth-grad-cam++", target_class)


# ---------------------------------------------------------------------------
# forward-only methods


def score_cam(
    model: M.Model,
    image: np.ndarray,
    layer: int,
    target_class: int,
    dropout_mode: str = "disabled",
    seed: int = 0,
) -> SaliencyMap:
    """Weight each channel by the class probability retained when the input
    is masked with that channel's own upsampled activation.

    Runs one pass for the activations plus one per channel, all under the
    same dropout masks so the channel scores are comparable. Never computes
    gradients.
    """
    batch = M.to_input_batch(image, model.spec)
    _, graph = M.predict(model, batch[0], dropout_mode, seed)
    acts = _layer_activation(graph, layer)
    k = acts.shape[1]
    out_h, out_w = batch.shape[2], batch.shape[3]

    masks = np.stack([normalize_map(upsample_bilinear(acts[0, i], out_h, out_w)) for i in range(k)])
    masked = batch * masks[:, None, :, :]
    logits = M.forward(model, masked.astype(batch.dtype), mode=dropout_mode, seed=seed).logits.data
    scores = T.stable_softmax(logits, axis=-1)[:, target_class]
    weights = T.stable_softmax(scores)

    raw = np.maximum((weights[None, :, None, None] * acts).sum(axis=1), 0.0)[0]
    return _finish(raw, graph, "score-cam", target_class)


def recipro_cam(
    model: M.Model,
    image: np.ndarray,
    layer: int,
    target_class: int,
    dropout_mode: str = "disabled",
    seed: int = 0,
) -> SaliencyMap:
    """Score each feature-map position by re-running the network tail on a
    feature map with only that spatial column kept.

    Forward-only: one full pass for the activations, then h*w tail passes
    under the same dropout masks.
    """
    batch = M.to_input_batch(image, model.spec)
    _, graph = M.predict(model, batch[0], dropout_mode, seed)
    acts = _layer_activation(graph, layer)
    h, w = acts.shape[2], acts.shape[3]

    deltas = np.zeros((h * w, 1, h, w), dtype=acts.dtype)
    ii, jj = np.divmod(np.arange(h * w), w)
    deltas[np.arange(h * w), 0, ii, jj] = 1.0
    masked_feats = acts * deltas
    logits = M.forward_tail(model, layer, masked_feats, mode=dropout_mode, seed=seed)
    raw = T.stable_softmax(logits, axis=-1)[:, target_class].reshape(h, w)
    return _finish(raw, graph, "recipro-cam", target_class)


# ---------------------------------------------------------------------------
# dispatch


def compute_map(
    model: M.Model,
    image: np.ndarray,
    config: AttributionConfig,
    layer: int,
    target_class: int,
    dropout_mode: str = "disabled",
    seed: int = 0,
) -> SaliencyMap:
    """Run the configured method on one image."""
    if config.method == "grad-cam":
        _, graph = M.predict(model, image, dropout_mode, seed)
        return grad_cam(graph, layer, target_class)
    if config.method == "grad-cam++":
        _, graph = M.predict(model, image, dropout_mode, seed)
        return grad_cam_pp(graph, layer, target_class)
    if config.method == "smooth-grad-cam++":
        return smooth_grad_cam_pp(
            model, image, layer, target_class,
            samples=config.smooth_samples, sigma_rel=config.smooth_sigma,
            seed=seed, dropout_mode=dropout_mode,
        )
    if config.method == "score-cam":
        return score_cam(model, image, layer, target_class, dropout_mode, seed)
    if config.method == "recipro-cam":
        return recipro_cam(model, image, layer, target_class, dropout_mode, seed)
    raise ParameterError(f"unknown method {config.method!r}")
