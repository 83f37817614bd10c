"""Desk-scale CNN with test-time dropout: architecture, weights, training.

The default network is [conv3x3 -> relu -> maxpool] x3 -> dropout(0.2) ->
conv3x3 -> relu -> GAP -> linear. One dropout layer sits in front of the last
conv block so Monte Carlo sampling perturbs the inputs of the attribution
layer. Weights round-trip through a small binary format (magic "RCAM",
version, f32 payload, CRC32 trailer).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, ParameterError, VersionError

WEIGHT_MAGIC = b"RCAM"
WEIGHT_VERSION = 1

_KIND_CODES = {"conv": 0, "relu": 1, "maxpool": 2, "dropout": 3, "gap": 4, "linear": 5}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0  # conv
    kernel: int = 0        # conv
    stride: int = 1        # conv
    padding: int = 0       # conv
    p: float = 0.0         # dropout
    out_features: int = 0  # linear


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer descriptors plus input geometry."""

    layers: tuple[LayerSpec, ...]
    classes: int
    input_size: int
    in_channels: int = 1

    def __post_init__(self):
        if self.classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.classes}")
        kinds = [l.kind for l in self.layers]
        if "conv" not in kinds:
            raise ParameterError("model must contain at least one conv layer")
        if "dropout" not in kinds:
            raise ParameterError("model must contain at least one dropout layer")
        self.trace_shapes()  # raises if consecutive shapes are incompatible

    def trace_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) after every layer; validates compatibility."""
        c, h, w = self.in_channels, self.input_size, self.input_size
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding:
                    raise ParameterError(f"layer {i}: kernel exceeds padded input")
                h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                c = layer.out_channels
            elif layer.kind == "maxpool":
                if h % 2 or w % 2:
                    raise ParameterError(f"layer {i}: maxpool needs even extents, got {h}x{w}")
                h, w = h // 2, w // 2
            elif layer.kind == "gap":
                h = w = 1
            elif layer.kind == "linear":
                c, h, w = layer.out_features, 1, 1
            elif layer.kind == "dropout":
                if not 0.0 <= layer.p < 1.0:
                    raise ParameterError(f"layer {i}: dropout p={layer.p} outside [0, 1)")
            shapes.append((c, h, w))
        return shapes

    def conv_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv"]

    @property
    def last_conv_layer(self) -> int:
        return self.conv_layers()[-1]


@dataclass
class WeightStore:
    """Per-layer parameter arrays, the spec they belong to, and provenance."""

    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    seed: int
    version: int = WEIGHT_VERSION

    def copy(self) -> "WeightStore":
        return WeightStore(self.spec, {k: v.copy() for k, v in self.tensors.items()}, self.seed, self.version)

    def allclose(self, other: "WeightStore") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


class Model(NamedTuple):
    spec: ModelSpec
    weights: WeightStore


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    label: int


def default_spec(classes: int = 3, input_size: int = 64, in_channels: int = 1, dropout_p: float = 0.2) -> ModelSpec:
    if input_size < 32:
        raise ParameterError(f"input size must be >= 32, got {input_size}")
    if input_size % 8:
        raise ParameterError(f"input size must be divisible by 8, got {input_size}")
    layers = (
        LayerSpec("conv", out_channels=8, kernel=3, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", out_channels=16, kernel=3, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", out_channels=32, kernel=3, padding=1),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("dropout", p=dropout_p),
        LayerSpec("conv", out_channels=32, kernel=3, padding=1),
        LayerSpec("relu"),
        LayerSpec("gap"),
        LayerSpec("linear", out_features=classes),
    )
    return ModelSpec(layers, classes=classes, input_size=input_size, in_channels=in_channels)


def init_weights(spec: ModelSpec, seed: int) -> WeightStore:
    """He-style normal init for conv/linear weights, zero biases."""
    tensors: dict[str, np.ndarray] = {}
    shapes = [(spec.in_channels, spec.input_size, spec.input_size)] + spec.trace_shapes()
    for i, layer in enumerate(spec.layers):
        cin = shapes[i][0]
        rng = T.make_rng(seed, i)
        if layer.kind == "conv":
            fan_in = cin * layer.kernel * layer.kernel
            std = np.sqrt(2.0 / fan_in)
            tensors[f"{i}.weight"] = rng.normal(0.0, std, (layer.out_channels, cin, layer.kernel, layer.kernel)).astype(T.DTYPE)
            tensors[f"{i}.bias"] = np.zeros(layer.out_channels, dtype=T.DTYPE)
        elif layer.kind == "linear":
            fan_in = int(np.prod(shapes[i]))
            std = np.sqrt(2.0 / fan_in)
            tensors[f"{i}.weight"] = rng.normal(0.0, std, (layer.out_features, fan_in)).astype(T.DTYPE)
            tensors[f"{i}.bias"] = np.zeros(layer.out_features, dtype=T.DTYPE)
    return WeightStore(spec, tensors, seed)


def build_default_model(classes: int = 3, input_size: int = 64, seed: int = 0, dropout_p: float = 0.2) -> Model:
    spec = default_spec(classes=classes, input_size=input_size, dropout_p=dropout_p)
    return Model(spec, init_weights(spec, seed))


# ---------------------------------------------------------------------------
# forward passes


class ForwardPass(NamedTuple):
    graph: T.Graph
    logits: T.Tensor
    layer_outputs: list[T.Tensor]
    params: dict[str, T.Tensor]


def _run_layers(model: Model, x: T.Tensor, start: int, mode: str, seed: int) -> ForwardPass:
    spec, store = model
    params: dict[str, T.Tensor] = {}
    outputs: list[T.Tensor] = []
    h = x
    for i in range(start, len(spec.layers)):
        layer = spec.layers[i]
        if layer.kind == "conv":
            w = params.setdefault(f"{i}.weight", T.Tensor(store.tensors[f"{i}.weight"], requires_grad=True))
            b = params.setdefault(f"{i}.bias", T.Tensor(store.tensors[f"{i}.bias"], requires_grad=True))
            h = T.conv2d(h, w, b, stride=layer.stride, padding=layer.padding)
        elif layer.kind == "relu":
            h = T.relu(h)
        elif layer.kind == "maxpool":
            h = T.max_pool2x2(h)
        elif layer.kind == "dropout":
            # one rng per (seed, layer): the same seed reproduces the same
            # perturbed network no matter how many passes reuse it
            h = T.dropout(h, layer.p, mode, T.make_rng(seed, i), shared_batch_mask=(mode == "mc-enabled"))
        elif layer.kind == "gap":
            h = T.global_avg_pool(h)
        elif layer.kind == "linear":
            if h.ndim == 4:
                h = T.flatten(h)
            w = params.setdefault(f"{i}.weight", T.Tensor(store.tensors[f"{i}.weight"], requires_grad=True))
            b = params.setdefault(f"{i}.bias", T.Tensor(store.tensors[f"{i}.bias"], requires_grad=True))
            h = T.linear(h, w, b)
        outputs.append(h)
    marks = {("layer", start + j): t for j, t in enumerate(outputs)}
    marks["logits"] = h
    marks["input"] = x
    return ForwardPass(T.Graph(h, marks=marks), h, outputs, params)


def forward(model: Model, batch: np.ndarray, mode: str = "disabled", seed: int = 0) -> ForwardPass:
    """Full forward over an NCHW batch, recording the graph."""
    spec = model.spec
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != spec.in_channels:
        raise DimensionError(f"expected (B, {spec.in_channels}, H, W) batch, got {batch.shape}")
    if batch.shape[2] != spec.input_size or batch.shape[3] != spec.input_size:
        raise DimensionError(
            f"image resolution {batch.shape[2]}x{batch.shape[3]} does not match model input {spec.input_size}"
        )
    return _run_layers(model, T.Tensor(batch), 0, mode, seed)


def forward_tail(model: Model, layer: int, features: np.ndarray, mode: str = "disabled", seed: int = 0) -> np.ndarray:
    """Re-run only the layers after ``layer`` on a batch of feature maps.

    Dropout layers in the tail draw the same per-layer masks as a full pass
    with the same seed, so tail scores are comparable to full-pass scores.
    """
    spec = model.spec
    if layer >= len(spec.layers) - 1:
        raise ParameterError(f"layer {layer} has no tail to re-run")
    fp = _run_layers(model, T.Tensor(np.asarray(features)), layer + 1, mode, seed)
    return fp.logits.data


def to_input_batch(image: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Lift (H, W) or (C, H, W) image data to a batch of one, replicating
    grayscale across the model's input channels when needed."""
    arr = np.asarray(image, dtype=T.DTYPE)
    if arr.ndim == 2:
        arr = np.broadcast_to(arr, (spec.in_channels,) + arr.shape).copy()
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"cannot interpret image of shape {np.asarray(image).shape}")
    return arr


def predict(model: Model, image: np.ndarray, dropout_mode: str = "disabled", seed: int = 0) -> tuple[Prediction, T.Graph]:
    """Classify one image, returning logits and the recorded graph."""
    batch = to_input_batch(image, model.spec)
    fp = forward(model, batch, mode=dropout_mode, seed=seed)
    logits = fp.logits.data[0]
    probs = T.stable_softmax(logits)
    return Prediction(logits=logits, probabilities=probs, label=int(np.argmax(logits))), fp.graph


# ---------------------------------------------------------------------------
# training


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def _mean_loss_and_accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> tuple[float, float]:
    total, correct = 0.0, 0
    for k in range(0, len(images), batch_size):
        fp = forward(model, images[k : k + batch_size], mode="disabled")
        logits = fp.logits.data.astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        y = labels[k : k + batch_size]
        total += float((lse - shifted[np.arange(len(y)), y]).sum())
        correct += int((logits.argmax(axis=1) == y).sum())
    return total / len(images), correct / len(images)


def evaluate_accuracy(model: Model, dataset) -> float:
    images, labels = _dataset_arrays(model.spec, dataset)
    return _mean_loss_and_accuracy(model, images, labels)[1]


def _dataset_arrays(spec: ModelSpec, dataset) -> tuple[np.ndarray, np.ndarray]:
    items = list(dataset.items if hasattr(dataset, "items") else dataset)
    if not items:
        raise ParameterError("dataset is empty")
    images = np.stack([to_input_batch(img, spec)[0] for img, _label, *_ in items])
    labels = np.array([int(item[1]) for item in items])
    if labels.min() < 0 or labels.max() >= spec.classes:
        raise ParameterError(f"labels must lie in [0, {spec.classes}), got range [{labels.min()}, {labels.max()}]")
    return images, labels


def train_toy(
    model: Model,
    dataset,
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 16,
    momentum: float = 0.9,
) -> tuple[WeightStore, list[float]]:
    """Cross-entropy SGD with momentum on a private copy of the weights.

    The returned history holds the full-dataset mean loss evaluated with
    dropout disabled after each epoch, so it is a deterministic function of
    the weights alone.
    """
    spec = model.spec
    images, labels = _dataset_arrays(spec, dataset)
    store = model.weights.copy()
    work = Model(spec, store)
    velocity = {k: np.zeros_like(v) for k, v in store.tensors.items()}
    rng = T.make_rng(seed, 0xD47A)
    history: list[float] = []

    for epoch in range(epochs):
        order = rng.permutation(len(images))
        for step, k in enumerate(range(0, len(images), batch_size)):
            idx = order[k : k + batch_size]
            fp = forward(work, images[idx], mode="train", seed=_step_seed(seed, epoch, step))
            logits = fp.logits.data
            probs = T.stable_softmax(logits)
            grad_logits = probs.copy()
            grad_logits[np.arange(len(idx)), labels[idx]] -= 1.0
            grad_logits /= len(idx)
            grads = T.backward_from_seed(fp.graph, grad_logits.astype(logits.dtype))
            for name, leaf in fp.params.items():
                g = grads[fp.graph.node_id(leaf)]
                velocity[name] = momentum * velocity[name] - lr * g
                store.tensors[name] += velocity[name]
        for name, arr in store.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise ArithmeticError(f"non-finite weights in {name} after epoch {epoch}")
        history.append(_mean_loss_and_accuracy(work, images, labels)[0])
    return store, history


# ---------------------------------------------------------------------------
# weight file format


def _pack_array(arr: np.ndarray) -> bytes:
    parts = [struct.pack("<B", arr.ndim)]
    parts += [struct.pack("<I", d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("weight file is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        (ndim,) = self.unpack("<B")
        shape = tuple(self.unpack("<I")[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4")
        return data.reshape(shape).astype(T.DTYPE)


def save_weights(store: WeightStore, path) -> None:
    """Serialize weights: magic, version, header, per-layer records, CRC32."""
    spec = store.spec
    parts = [
        WEIGHT_MAGIC,
        struct.pack("<H", WEIGHT_VERSION),
        struct.pack("<Q", store.seed),
        struct.pack("<HHH", spec.classes, spec.input_size, spec.in_channels),
        struct.pack("<H", len(spec.layers)),
    ]
    for i, layer in enumerate(spec.layers):
        parts.append(struct.pack("<B", _KIND_CODES[layer.kind]))
        if layer.kind == "conv":
            parts.append(struct.pack("<HHHH", layer.out_channels, layer.kernel, layer.stride, layer.padding))
            parts.append(_pack_array(store.tensors[f"{i}.weight"]))
            parts.append(_pack_array(store.tensors[f"{i}.bias"]))
        elif layer.kind == "dropout":
            parts.append(struct.pack("<d", layer.p))
        elif layer.kind == "linear":
            parts.append(struct.pack("<H", layer.out_features))
            parts.append(_pack_array(store.tensors[f"{i}.weight"]))
            parts.append(_pack_array(store.tensors[f"{i}.bias"]))
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_weights(path) -> WeightStore:
    """Parse and validate a weight file; raises before returning any partial model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(WEIGHT_MAGIC) + 6:
        raise FormatError("weight file is truncated")
    if blob[: len(WEIGHT_MAGIC)] != WEIGHT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {WEIGHT_MAGIC!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise FormatError("CRC mismatch, weight file is corrupt")

    r = _Reader(blob[:-4])
    r.take(len(WEIGHT_MAGIC))
    (version,) = r.unpack("<H")
    if version != WEIGHT_VERSION:
        raise VersionError(f"unsupported weight format version {version} (supported: {WEIGHT_VERSION})")
    (seed,) = r.unpack("<Q")
    classes, input_size, in_channels = r.unpack("<HHH")
    (n_layers,) = r.unpack("<H")

    layers: list[LayerSpec] = []
    tensors: dict[str, np.ndarray] = {}
    for i in range(n_layers):
        (code,) = r.unpack("<B")
        kind = _KIND_NAMES.get(code)
        if kind is None:
            raise FormatError(f"unknown layer kind code {code}")
        if kind == "conv":
            out_channels, kernel, stride, padding = r.unpack("<HHHH")
            layers.append(LayerSpec("conv", out_channels=out_channels, kernel=kernel, stride=stride, padding=padding))
            tensors[f"{i}.weight"] = r.array()
            tensors[f"{i}.bias"] = r.array()
        elif kind == "dropout":
            (p,) = r.unpack("<d")
            layers.append(LayerSpec("dropout", p=float(p)))
        elif kind == "linear":
            (out_features,) = r.unpack("<H")
            layers.append(LayerSpec("linear", out_features=out_features))
            tensors[f"{i}.weight"] = r.array()
            tensors[f"{i}.bias"] = r.array()
        else:
            layers.append(LayerSpec(kind))
    if r.pos != len(r.blob):
        raise FormatError(f"{len(r.blob) - r.pos} unexpected trailing bytes")

    spec = ModelSpec(tuple(layers), classes=classes, input_size=input_size, in_channels=in_channels)
    return WeightStore(spec, tensors, seed, version)


def load_model(path) -> Model:
    store = load_weights(path)
    return Model(store.spec, store)
