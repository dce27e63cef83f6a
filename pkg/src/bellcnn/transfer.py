"""Transfer learning at its core: memoized bottleneck extraction through a
frozen trunk, training of a single final classification layer, and
confidence-scored inference.

The trunk is any deterministic function image -> feature vector (for a
frozen BellCNN, the flatten output). Bottlenecks are cached one file per
entry, keyed by image content hash under a per-trunk directory, so each
image is embedded at most once per trunk and staleness is impossible.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import CLASS_NAMES
from .errors import (
    DegenerateLabelsError,
    DimensionMismatchError,
    TrunkDimensionDriftError,
)
from .layers import DenseLayer, Mode, conv_forward, maxpool_forward, relu
from .model import ModelGraph, forward
from .optim import AdamHyper, AdamState, adam_step
from .tensor import Tensor

_TRUNK_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class BottleneckVector:
    """A trunk's feature vector for one image, with its cache identity."""

    features: Tensor
    source_key: str
    trunk_id: str


class FeatureTrunk:
    """Named deterministic feature extractor."""

    def __init__(self, trunk_id: str, fn: Callable[[Tensor], Tensor]):
        if not _TRUNK_ID_RE.match(trunk_id):
            raise ValueError(f"trunk id must be filesystem-safe, got {trunk_id!r}")
        self.trunk_id = trunk_id
        self._fn = fn

    def __call__(self, image: Tensor) -> Tensor:
        return self._fn(image)


def trunk_from_graph(g: ModelGraph, trunk_id: str) -> FeatureTrunk:
    """Feature extractor that runs a graph's layers through its flatten
    stage (inference path), yielding the flattened feature map."""
    cut = next((i for i, rec in enumerate(g.layers) if rec.kind == "flatten"), None)
    if cut is None:
        raise ValueError("graph has no flatten stage to cut at")
    prefix = ModelGraph(g.layers[:cut + 1], Mode.INFER, g.seed, g.input_shape,
                        num_classes=g.num_classes, dtype=g.dtype, frozen=g.frozen)

    def fn(image: Tensor) -> Tensor:
        cur = image if image.dtype == prefix.dtype else image.astype(prefix.dtype)
        for rec in prefix.layers:
            if rec.kind == "conv":
                cur, _ = conv_forward(cur, rec.layer)
                if rec.activation == "relu":
                    cur = relu(cur)
            elif rec.kind == "pool":
                cur, _ = maxpool_forward(cur, rec.layer)
            elif rec.kind == "flatten":
                cur = Tensor(cur.array.reshape(-1), dtype=cur.dtype)
        return cur

    return FeatureTrunk(trunk_id, fn)


def image_content_key(image: Tensor) -> str:
    """Hex digest of the image's canonical little-endian float64 bytes."""
    canonical = image.array.astype("<f8").tobytes()
    return hashlib.sha256(canonical).hexdigest()


class BottleneckStore:
    """One file per bottleneck: ``<dir>/<trunk_id>/<content-hash>`` holding
    a ``BNK1 <trunk_id> <d>`` header line then d decimal floats."""

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, source_key: str, trunk_id: str) -> Path:
        return self.root / trunk_id / source_key

    def get(self, source_key: str, trunk_id: str) -> Optional[Tensor]:
        path = self._path(source_key, trunk_id)
        if not path.exists():
            return None
        lines = path.read_text(encoding="utf-8").splitlines()
        header = lines[0].split()
        if len(header) != 3 or header[0] != "BNK1" or header[1] != trunk_id:
            return None
        d = int(header[2])
        values = [float(v) for v in lines[1:1 + d]]
        if len(values) != d:
            return None
        return Tensor(np.array(values))

    def put(self, source_key: str, trunk_id: str, features: Tensor):
        path = self._path(source_key, trunk_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = f"BNK1 {trunk_id} {features.size}\n"
        body += "".join(f"{float(v)!r}\n" for v in features.array.reshape(-1))
        path.write_text(body, encoding="utf-8")


class InMemoryStore:
    """Dict-backed store with the same get/put surface."""

    def __init__(self):
        self._entries: dict[tuple[str, str], Tensor] = {}

    def get(self, source_key: str, trunk_id: str) -> Optional[Tensor]:
        return self._entries.get((source_key, trunk_id))

    def put(self, source_key: str, trunk_id: str, features: Tensor):
        self._entries[(source_key, trunk_id)] = features


def cache_bottlenecks(images: Sequence[Tensor], trunk: FeatureTrunk,
                      store) -> list[BottleneckVector]:
    """Compute each image's bottleneck at most once per (image, trunk).

    Cached vectors are stored as float64 decimals; trunk outputs are
    widened to float64 before caching so hits and fresh computations are
    bitwise identical.
    """
    out = []
    width = None
    for image in images:
        key = image_content_key(image)
        cached = store.get(key, trunk.trunk_id)
        if cached is None:
            features = trunk(image).astype(np.float64)
            if features.shape.rank != 1:
                raise TrunkDimensionDriftError(
                    f"trunk must return rank-1 vectors, got {features.dims}")
            store.put(key, trunk.trunk_id, features)
        else:
            features = cached
        if width is None:
            width = features.size
        elif features.size != width:
            raise TrunkDimensionDriftError(
                f"trunk width drifted: {width} then {features.size}")
        out.append(BottleneckVector(features, key, trunk.trunk_id))
    return out


@dataclass
class HeadModel:
    """The retrainable final layer: a zero-initialized dense map to the
    two classes."""

    dense: DenseLayer
    trained_steps: int = 0

    @classmethod
    def zeros(cls, in_units: int, num_classes: int = 2) -> "HeadModel":
        w = Tensor(np.zeros((in_units, num_classes)))
        b = Tensor(np.zeros(num_classes))
        return cls(DenseLayer(in_units, num_classes, w, b))


def train_head(bottlenecks: Sequence[tuple[BottleneckVector, int]],
               hyper: AdamHyper, steps: int) -> HeadModel:
    """Full-batch softmax + cross-entropy training of the head alone.

    The trunk is untouched by construction: only the head's weights ever
    enter the update. Zero init plus a convex objective make the result a
    deterministic function of the inputs.
    """
    if not bottlenecks:
        raise DegenerateLabelsError("no bottlenecks to train on")
    labels = sorted({label for _, label in bottlenecks})
    if len(labels) < 2:
        raise DegenerateLabelsError(f"need both classes, got only {labels}")

    width = bottlenecks[0][0].features.size
    for vec, _ in bottlenecks:
        if vec.features.size != width:
            raise TrunkDimensionDriftError(
                f"bottleneck width drifted: {width} then {vec.features.size}")

    x = np.stack([vec.features.array for vec, _ in bottlenecks])
    n = len(bottlenecks)
    y = np.zeros((n, 2))
    y[np.arange(n), [label for _, label in bottlenecks]] = 1.0

    head = HeadModel.zeros(width)
    w_state = AdamState.initial(head.dense.weights)
    b_state = AdamState.initial(head.dense.bias)

    for _ in range(steps):
        logits = x @ head.dense.weights.array + head.dense.bias.array
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        d_logits = (probs - y) / n
        d_w = x.T @ d_logits
        d_b = d_logits.sum(axis=0)
        new_w, w_state = adam_step(head.dense.weights, Tensor(d_w), w_state, hyper)
        new_b, b_state = adam_step(head.dense.bias, Tensor(d_b), b_state, hyper)
        head.dense.weights = new_w
        head.dense.bias = new_b
        head.trained_steps += 1
    return head


def head_logits(head: HeadModel, features: Tensor) -> np.ndarray:
    if features.size != head.dense.in_units:
        raise DimensionMismatchError(
            f"bottleneck width {features.size} != head input "
            f"{head.dense.in_units}")
    return features.array.reshape(-1) @ head.dense.weights.array + head.dense.bias.array


def infer_scores(head: HeadModel, bottleneck: BottleneckVector
                 ) -> list[tuple[str, float]]:
    """Two (label, score) pairs summing to 1, sorted by descending score;
    ties keep class-index order (control before alzheimer)."""
    logits = head_logits(head, bottleneck.features)
    shifted = logits - logits.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    pairs = list(zip(CLASS_NAMES, probs.tolist()))
    pairs.sort(key=lambda p: -p[1])  # stable: ties keep index order
    return pairs


def format_scores(scores: Sequence[tuple[str, float]]) -> str:
    """Render scores one per line as ``label score``."""
    return "".join(f"{label} {score:.6g}\n" for label, score in scores)


def graph_from_head(head: HeadModel, seed: int = 0) -> ModelGraph:
    """Wrap a trained head as a one-layer graph so it can be frozen."""
    from .model import ACT_SOFTMAX, GraphLayer
    rec = GraphLayer("dense", (head.dense.in_units,), (head.dense.out_units,),
                     head.dense, ACT_SOFTMAX)
    return ModelGraph([rec], Mode.INFER, seed, (head.dense.in_units,),
                      num_classes=head.dense.out_units)


def scores_from_graph(g: ModelGraph, image: Tensor) -> list[tuple[str, float]]:
    """Confidence scores for a full graph's inference on one image."""
    _, probs, _ = forward(g, image)
    pairs = list(zip(CLASS_NAMES, probs.array.astype(np.float64).tolist()))
    pairs.sort(key=lambda p: -p[1])
    return pairs
