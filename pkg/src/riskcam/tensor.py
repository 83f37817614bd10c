"""Dense-tensor engine with forward operators and reverse-mode autodiff.

Just enough machinery for small CNNs: conv2d, elementwise ops, pooling,
a linear layer and seeded dropout. Every operator records itself into an
implicit graph (parent links on the output tensor); ``Graph`` freezes a
finished forward pass in topological order so gradients of a chosen logit
can be pulled at any intermediate node.

Numerics are float32 by default; float64 inputs are propagated unchanged,
which the finite-difference tests rely on.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import DimensionError, GraphError, ParameterError

DTYPE = np.float32

DROPOUT_MODES = ("train", "mc-enabled", "disabled")


class Tensor:
    """N-dimensional dense array with an optional autodiff record.

    ``parents`` and ``grad_fn`` are set by the operators below; leaves have
    neither. Tensors are treated as immutable once created.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "grad_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        grad_fn: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, rg, op=op, parents=parents, grad_fn=grad_fn)


# ---------------------------------------------------------------------------
# elementwise operators


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        # subgradient at 0 is 0
        return (g * (x.data > 0),)

    return _node(out, "relu", (x,), grad_fn)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")

    def grad_fn(g):
        return g, g

    return _node(a.data + b.data, "add", (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")

    def grad_fn(g):
        return g * b.data, g * a.data

    return _node(a.data * b.data, "mul", (a, b), grad_fn)


def stable_softmax(arr: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax on a plain array (also used outside graphs)."""
    shifted = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the class axis (the last axis)."""
    x = as_tensor(x)
    s = stable_softmax(x.data, axis=-1)

    def grad_fn(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _node(s, "softmax", (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolution / pooling / linear


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Column matrix (B, C*kh*kw, Ho*Wo) of a padded input."""
    b, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return windows.reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) over NCHW input."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input/kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: bad stride/padding ({stride}, {padding})")
    b, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin != cin_k:
        raise DimensionError(f"conv2d: input has {cin} channels but kernel expects {cin_k}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols) + bias.data[:, None]
    out = out.reshape(b, cout, ho, wo)

    def grad_fn(g):
        g2 = g.reshape(b, cout, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        db = g.sum(axis=(0, 2, 3))
        dcols = np.matmul(wmat.T, g2).reshape(b, cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dw, db

    return _node(out, "conv2d", (x, kernel, bias), grad_fn)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first position."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2x2: expected 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2x2: spatial extents must be even, got {h}x{w}")
    xt = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = xt.argmax(axis=-1)
    out = np.take_along_axis(xt, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        dxt = np.zeros_like(xt)
        np.put_along_axis(dxt, idx[..., None], g[..., None], axis=-1)
        dx = dxt.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (dx,)

    return _node(out, "max_pool2x2", (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Arithmetic mean over the spatial extent, keeping a 1x1 map."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    _, _, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _node(out, "global_avg_pool", (x,), grad_fn)


def flatten(x: Tensor) -> Tensor:
    """Collapse all non-batch axes."""
    x = as_tensor(x)
    b = x.shape[0]
    out = x.data.reshape(b, -1)

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _node(out, "flatten", (x,), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: out = x @ weight.T + bias."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear: expected 2-D input/weight, got {x.shape} and {weight.shape}")
    k, f = weight.shape
    if x.shape[1] != f:
        raise DimensionError(f"linear: input features {x.shape[1]} do not match weight features {f}")
    if bias.shape != (k,):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match {k} outputs")
    out = x.data @ weight.data.T + bias.data

    def grad_fn(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _node(out, "linear", (x, weight, bias), grad_fn)


# ---------------------------------------------------------------------------
# dropout


def dropout(
    x: Tensor,
    p: float,
    mode: str,
    rng: np.random.Generator,
    shared_batch_mask: bool = False,
) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    ``mode`` is one of "train", "mc-enabled" or "disabled". The mask is drawn
    from ``rng``, so an identical seeded generator yields an identical mask.
    With ``shared_batch_mask`` the mask is drawn once per sample shape and
    broadcast over the batch axis, which keeps a batch of input variants under
    one common perturbed network (needed when masked passes must be
    score-comparable).
    """
    x = as_tensor(x)
    if mode not in DROPOUT_MODES:
        raise ParameterError(f"dropout: unknown mode {mode!r}")
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout: p must be in [0, 1), got {p}")
    if mode == "disabled" or p == 0.0:
        def identity_grad(g):
            return (g,)

        return _node(x.data, "dropout", (x,), identity_grad)

    mask_shape = (1,) + x.shape[1:] if shared_batch_mask and x.ndim > 1 else x.shape
    keep = (rng.random(mask_shape) >= p).astype(x.dtype)
    scaled = keep * x.dtype.type(1.0 / (1.0 - p))
    out = x.data * scaled

    def grad_fn(g):
        # the recorded mask is a fixed constant of this pass
        return (g * scaled,)

    return _node(out, "dropout", (x,), grad_fn)


# ---------------------------------------------------------------------------
# recorded graphs and backward


class Graph:
    """A frozen forward pass: nodes in topological order, parents first.

    ``marks`` gives stable names (e.g. model layer indices) to chosen nodes.
    """

    def __init__(self, output: Tensor, marks: dict | None = None):
        self.output = output
        self.nodes: list[Tensor] = _toposort(output)
        self._pos = {id(t): i for i, t in enumerate(self.nodes)}
        self.marks: dict = {}
        for label, t in (marks or {}).items():
            self.marks[label] = self.node_id(t)

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, t: Tensor) -> int:
        try:
            return self._pos[id(t)]
        except KeyError:
            raise GraphError("tensor is not part of this recorded graph") from None

    def activation(self, node: int) -> np.ndarray:
        return self.nodes[node].data

    def parent_ids(self, node: int) -> tuple[int, ...]:
        return tuple(self._pos[id(p)] for p in self.nodes[node].parents)


def _toposort(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward_from_seed(graph: Graph, seed_grad: np.ndarray) -> dict[int, np.ndarray]:
    """Reverse-accumulate d(output . seed_grad)/d(node) for every graph node."""
    if seed_grad.shape != graph.output.shape:
        raise GraphError(f"seed gradient shape {seed_grad.shape} does not match output {graph.output.shape}")
    grads: dict[int, np.ndarray] = {len(graph.nodes) - 1: np.asarray(seed_grad)}
    for nid in range(len(graph.nodes) - 1, -1, -1):
        node = graph.nodes[nid]
        g = grads.get(nid)
        if g is None or node.grad_fn is None:
            continue
        parent_grads = node.grad_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            pid = graph.node_id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return grads


def backward(graph: Graph, class_index: int, wrt) -> Tensor:
    """Gradient of the selected output logit w.r.t. one graph node.

    ``wrt`` may be a node id, a mark label, or a Tensor recorded in the graph.
    Dropout masks of the recorded pass are treated as constants.
    """
    out = graph.output
    if out.ndim == 1:
        seed = np.zeros_like(out.data)
        seed[class_index] = 1.0
    elif out.ndim == 2:
        seed = np.zeros_like(out.data)
        seed[0, class_index] = 1.0
    else:
        raise GraphError(f"output of shape {out.shape} is not a logit vector")

    if isinstance(wrt, Tensor):
        nid = graph.node_id(wrt)
    elif isinstance(wrt, (int, np.integer)) and 0 <= wrt < len(graph.nodes):
        nid = int(wrt)
    else:
        raise GraphError(f"node {wrt!r} is not part of this recorded graph")

    grads = backward_from_seed(graph, seed)
    g = grads.get(nid)
    if g is None:
        # disconnected from the output (not an ancestor)
        raise GraphError(f"node {wrt!r} is not an ancestor of the graph output")
    return Tensor(g)


def make_rng(*key: int | Iterable[int]) -> np.random.Generator:
    """Deterministic generator keyed by one or more nonnegative integers."""
    flat: list[int] = []
    for k in key:
        if isinstance(k, (int, np.integer)):
            flat.append(int(k))
        else:
            flat.extend(int(v) for v in k)
    if any(v < 0 for v in flat):
        raise ParameterError(f"rng key must be nonnegative, got {flat}")
    return np.random.default_rng(np.random.SeedSequence(flat))
