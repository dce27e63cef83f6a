"""The BellCNN graph: five conv+maxpool stages whose filter counts rise
and fall (32-64-128-64-32), a 1024-unit fully connected layer with
dropout, and a 2-class softmax head.

A ModelGraph is an ordered list of layer records whose shapes are
validated to compose at build time. Training runs at 64-bit; thawed
graphs carry 32-bit weights and evaluate at that precision.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (
    BadConfigError,
    BadInputSizeError,
    FrozenGraphImmutableError,
    ShapeMismatchError,
    StaleCacheError,
)
from .layers import (
    ConvLayer,
    DenseLayer,
    DropoutLayer,
    LayerGradients,
    Mode,
    PoolLayer,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    dropout_forward,
    maxpool_backward,
    maxpool_forward,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
)
from .optim import softmax_cross_entropy
from .tensor import ConvGeometry, Tensor

BELL_FILTERS = (32, 64, 128, 64, 32)

ACT_RELU = "relu"
ACT_SOFTMAX = "softmax"
ACT_NONE = "none"

_graph_ids = itertools.count(1)


@dataclass(frozen=True)
class BellConfig:
    """Architecture knobs; the defaults are the bell-shaped stack."""

    input_w: int = 64
    input_h: int = 64
    input_depth: int = 1
    kernel_extent: int = 5
    conv_filters: tuple[int, ...] = BELL_FILTERS
    fc_units: int = 1024
    keep_prob: float = 0.8
    num_classes: int = 2
    fc_activation: str = ACT_SOFTMAX
    seed: int = 0


@dataclass
class GraphLayer:
    """One record in the graph: a kind, optional parameters, an optional
    activation applied after the affine map, and composed shapes."""

    kind: str                    # conv | pool | flatten | dense | dropout
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    layer: object = None         # ConvLayer | PoolLayer | DenseLayer | DropoutLayer
    activation: str = ACT_NONE


@dataclass
class ModelGraph:
    """Ordered layer records plus run mode; single-owner while training."""

    layers: list[GraphLayer]
    mode: Mode
    seed: int
    input_shape: tuple[int, int, int]   # (H, W, D)
    num_classes: int
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float64))
    frozen: bool = False
    graph_id: int = field(default_factory=lambda: next(_graph_ids))

    def parameters(self):
        """Yield (layer_index, name, tensor) for every learnable tensor."""
        for i, rec in enumerate(self.layers):
            if rec.kind in ("conv", "dense"):
                yield i, "weights", rec.layer.weights
                yield i, "bias", rec.layer.bias

    def param_count(self) -> int:
        return sum(t.size for _, _, t in self.parameters())

    def set_parameter(self, layer_index: int, name: str, value: Tensor):
        rec = self.layers[layer_index]
        current = getattr(rec.layer, name)
        if current.dims != value.dims:
            raise ShapeMismatchError(
                f"parameter {name} at layer {layer_index}: "
                f"{current.dims} vs {value.dims}")
        setattr(rec.layer, name, value)


@dataclass
class GraphCaches:
    """Per-layer forward records needed by backward."""

    graph_id: int
    mode: Mode
    records: list
    probs: Tensor


def _uniform_init(rng: np.random.Generator, fan_in: int, dims) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=dims))


def validate_config(cfg: BellConfig):
    if not cfg.conv_filters or any(k < 1 for k in cfg.conv_filters):
        raise BadConfigError(f"conv_filters must be positive, got {cfg.conv_filters}")
    if cfg.kernel_extent < 1 or cfg.kernel_extent % 2 == 0:
        raise BadConfigError(
            f"kernel_extent must be odd and >= 1 for same-size padding, "
            f"got {cfg.kernel_extent}")
    if cfg.fc_units < 1:
        raise BadConfigError("fc_units must be >= 1")
    if not (0.0 < cfg.keep_prob <= 1.0):
        raise BadConfigError(f"keep_prob must be in (0, 1], got {cfg.keep_prob}")
    if cfg.num_classes < 2:
        raise BadConfigError("num_classes must be >= 2")
    if cfg.fc_activation not in (ACT_SOFTMAX, ACT_RELU):
        raise BadConfigError(f"fc_activation must be softmax or relu, "
                             f"got {cfg.fc_activation!r}")
    if cfg.input_depth < 1:
        raise BadConfigError("input_depth must be >= 1")
    stages = len(cfg.conv_filters)
    divisor = 2 ** stages
    if cfg.input_w % divisor or cfg.input_h % divisor:
        raise BadInputSizeError(
            f"input {cfg.input_w}x{cfg.input_h} must be divisible by "
            f"{divisor} to survive {stages} 2x poolings")


def build_bellcnn(cfg: BellConfig) -> ModelGraph:
    """Assemble the graph, validating that consecutive shapes compose."""
    validate_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    records: list[GraphLayer] = []

    h, w, depth = cfg.input_h, cfg.input_w, cfg.input_depth
    f = cfg.kernel_extent
    pad = (f - 1) // 2  # same-size padding for stride-1 conv
    for k in cfg.conv_filters:
        geom = ConvGeometry(k=k, f=f, s=1, p=pad)
        weights = _uniform_init(rng, f * f * depth, (f, f, depth, k))
        bias = Tensor(np.zeros(k))
        conv = ConvLayer(geom, depth, weights, bias)
        records.append(GraphLayer("conv", (h, w, depth), (h, w, k), conv, ACT_RELU))
        pool = PoolLayer(window=2, stride=2)
        records.append(GraphLayer("pool", (h, w, k), (h // 2, w // 2, k), pool))
        h, w, depth = h // 2, w // 2, k

    flat = h * w * depth
    records.append(GraphLayer("flatten", (h, w, depth), (flat,)))

    fc_w = _uniform_init(rng, flat, (flat, cfg.fc_units))
    fc = DenseLayer(flat, cfg.fc_units, fc_w, Tensor(np.zeros(cfg.fc_units)))
    records.append(GraphLayer("dense", (flat,), (cfg.fc_units,), fc,
                              cfg.fc_activation))
    records.append(GraphLayer("dropout", (cfg.fc_units,), (cfg.fc_units,),
                              DropoutLayer(cfg.keep_prob)))

    out_w = _uniform_init(rng, cfg.fc_units, (cfg.fc_units, cfg.num_classes))
    head = DenseLayer(cfg.fc_units, cfg.num_classes, out_w,
                      Tensor(np.zeros(cfg.num_classes)))
    records.append(GraphLayer("dense", (cfg.fc_units,), (cfg.num_classes,),
                              head, ACT_SOFTMAX))

    for prev, nxt in zip(records, records[1:]):
        if prev.out_shape != nxt.in_shape:
            raise BadConfigError(
                f"layer shapes do not compose: {prev.kind} -> {nxt.kind}, "
                f"{prev.out_shape} vs {nxt.in_shape}")

    return ModelGraph(records, Mode.TRAIN, cfg.seed,
                      (cfg.input_h, cfg.input_w, cfg.input_depth),
                      cfg.num_classes)


def forward(g: ModelGraph, x: Tensor,
            rng: Optional[np.random.Generator] = None
            ) -> tuple[Tensor, Tensor, GraphCaches]:
    """Run the graph; returns (logits, probs, caches).

    The final dense layer's softmax produces the probs; its inputs are
    the logits. Infer mode is deterministic (dropout is the identity).
    """
    if x.dims != g.input_shape:
        raise ShapeMismatchError(f"expected input {g.input_shape}, got {x.dims}")
    cur = x if x.dtype == g.dtype else x.astype(g.dtype)
    records = []
    logits = None
    last = len(g.layers) - 1

    for i, rec in enumerate(g.layers):
        if rec.kind == "conv":
            pre, cache = conv_forward(cur, rec.layer)
            entry = {"cache": cache}
            if rec.activation == ACT_RELU:
                entry["pre_act"] = pre
                cur = relu(pre)
            else:
                cur = pre
            records.append(entry)
        elif rec.kind == "pool":
            cur, cache = maxpool_forward(cur, rec.layer)
            records.append({"cache": cache})
        elif rec.kind == "flatten":
            records.append({"in_dims": cur.dims})
            cur = Tensor(cur.array.reshape(-1), dtype=cur.dtype)
        elif rec.kind == "dense":
            pre, cache = dense_forward(cur, rec.layer)
            entry = {"cache": cache}
            if i == last:
                logits = pre
                cur = softmax(pre)
            elif rec.activation == ACT_SOFTMAX:
                cur = softmax(pre)
                entry["act_out"] = cur
            elif rec.activation == ACT_RELU:
                entry["pre_act"] = pre
                cur = relu(pre)
            else:
                cur = pre
            records.append(entry)
        elif rec.kind == "dropout":
            layer = DropoutLayer(rec.layer.keep_prob, g.mode)
            cur, mask = dropout_forward(cur, layer, rng)
            records.append({"mask": mask})
        else:
            raise BadConfigError(f"unknown layer kind {rec.kind!r}")

    probs = cur
    return logits, probs, GraphCaches(g.graph_id, g.mode, records, probs)


def backward(g: ModelGraph, caches: GraphCaches, target: Tensor
             ) -> list[Optional[LayerGradients]]:
    """Gradients of cross-entropy(softmax(logits), target) for every
    parameter tensor, in graph order (None for parameterless layers)."""
    if g.frozen:
        raise FrozenGraphImmutableError("thawed graphs are inference-only")
    if caches.graph_id != g.graph_id or caches.mode is not Mode.TRAIN:
        raise StaleCacheError("caches must come from a train-mode forward "
                              "on this graph")
    if target.dims != (g.num_classes,):
        raise ShapeMismatchError(
            f"target must be [{g.num_classes}], got {target.dims}")

    # fused softmax + cross-entropy at the output layer
    d = Tensor(caches.probs.array - target.array)

    grads: list[Optional[LayerGradients]] = [None] * len(g.layers)
    last = len(g.layers) - 1
    for i in range(last, -1, -1):
        rec = g.layers[i]
        entry = caches.records[i]
        if rec.kind == "dense":
            if i != last:
                if rec.activation == ACT_SOFTMAX:
                    d = softmax_backward(d, entry["act_out"])
                elif rec.activation == ACT_RELU:
                    d = relu_backward(d, entry["pre_act"])
            lg = dense_backward(d, entry["cache"])
            grads[i] = lg
            d = lg.d_input
        elif rec.kind == "dropout":
            d = Tensor(d.array * entry["mask"].array)
        elif rec.kind == "flatten":
            d = Tensor(d.array.reshape(entry["in_dims"]), dtype=d.dtype)
        elif rec.kind == "pool":
            lg = maxpool_backward(d, entry["cache"])
            d = lg.d_input
        elif rec.kind == "conv":
            if rec.activation == ACT_RELU:
                d = relu_backward(d, entry["pre_act"])
            lg = conv_backward(d, entry["cache"])
            grads[i] = lg
            d = lg.d_input
    return grads


def loss_and_gradients(g: ModelGraph, x: Tensor, target: Tensor,
                       rng: Optional[np.random.Generator] = None):
    """Train-mode forward + backward in one call; returns
    (loss, probs, per-layer gradients)."""
    logits, probs, caches = forward(g, x, rng)
    loss, _ = softmax_cross_entropy(logits, target)
    grads = backward(g, caches, target)
    return loss, probs, grads


def predict(g: ModelGraph, x: Tensor) -> tuple[int, Tensor]:
    """Deterministic inference: argmax class and per-class scores.

    Always evaluates the inference path (dropout identity) regardless of
    the graph's current mode; ties go to the lowest class index.
    """
    if g.mode is Mode.INFER:
        _, probs, _ = forward(g, x)
    else:
        infer_view = replace(g, mode=Mode.INFER, graph_id=g.graph_id)
        _, probs, _ = forward(infer_view, x)
    return int(np.argmax(probs.array)), probs
