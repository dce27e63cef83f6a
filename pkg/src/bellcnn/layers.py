"""Forward and reverse-mode backward passes for every layer kind:
convolution, max-pooling, ReLU, fully connected, dropout, softmax.

All operations are pure functions of their inputs (plus an explicitly
passed generator for dropout); analytic gradients are the contract and
are pinned by finite-difference tests. Convolution gathers receptive
fields into a patch matrix and runs one matmul per pass, which keeps the
arithmetic identical to the direct per-window summation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError
from .tensor import ConvGeometry, Tensor, conv_out_dims


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass
class ConvLayer:
    """Bank of K learnable FxF filters over in_depth channels.

    weights: [F, F, in_depth, K]; bias: [K].
    """

    geom: ConvGeometry
    in_depth: int
    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        f, k = self.geom.f, self.geom.k
        if self.weights.dims != (f, f, self.in_depth, k):
            raise ShapeMismatchError(
                f"conv weights must be [{f},{f},{self.in_depth},{k}], "
                f"got {self.weights.dims}")
        if self.bias.dims != (k,):
            raise ShapeMismatchError(f"conv bias must be [{k}], got {self.bias.dims}")


@dataclass(frozen=True)
class PoolLayer:
    """Square max-pool window with its stride."""

    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError("pool window and stride must be >= 1")


@dataclass
class DenseLayer:
    """Fully connected map: y = x W + b.  weights: [in_units, out_units]."""

    in_units: int
    out_units: int
    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weights.dims != (self.in_units, self.out_units):
            raise ShapeMismatchError(
                f"dense weights must be [{self.in_units},{self.out_units}], "
                f"got {self.weights.dims}")
        if self.bias.dims != (self.out_units,):
            raise ShapeMismatchError(
                f"dense bias must be [{self.out_units}], got {self.bias.dims}")


@dataclass(frozen=True)
class DropoutLayer:
    """Inverted dropout: keep each unit with probability keep_prob and
    scale kept units by 1/keep_prob, so inference is the identity."""

    keep_prob: float
    mode: Mode = Mode.TRAIN

    def __post_init__(self):
        if not (0.0 < self.keep_prob <= 1.0):
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")


@dataclass
class LayerGradients:
    """Gradients of a layer's output w.r.t. its input and parameters."""

    d_input: Tensor
    d_weights: Optional[Tensor] = None
    d_bias: Optional[Tensor] = None


# --- convolution ---

@dataclass
class ConvCache:
    patches: np.ndarray        # [H2*W2, F*F*Din]
    x_dims: tuple[int, ...]
    out_dims: tuple[int, ...]  # (H2, W2, K)
    geom: ConvGeometry
    in_depth: int
    weights: np.ndarray        # [F, F, Din, K]


def _gather_patches(xp: np.ndarray, f: int, s: int, out_h: int, out_w: int) -> np.ndarray:
    # windows: [out positions incl. stride skips, D, F, F] -> (row, col, F, F, D)
    windows = sliding_window_view(xp, (f, f), axis=(0, 1))[::s, ::s]
    patches = windows.transpose(0, 1, 3, 4, 2)  # [H2, W2, F, F, D]
    return np.ascontiguousarray(patches).reshape(out_h * out_w, -1)


def conv_forward(x: Tensor, layer: ConvLayer) -> tuple[Tensor, ConvCache]:
    """Cross-correlate x [H, W, Din] with the filter bank -> [H2, W2, K]."""
    if x.shape.rank != 3 or x.dims[2] != layer.in_depth:
        raise ShapeMismatchError(
            f"expected input [H,W,{layer.in_depth}], got {x.dims}")
    h, w, _ = x.dims
    geom = layer.geom
    out_w, out_h = conv_out_dims(w, h, geom)

    xa = x.array
    if geom.p > 0:
        xp = np.pad(xa, ((geom.p, geom.p), (geom.p, geom.p), (0, 0)))
    else:
        xp = xa
    patches = _gather_patches(xp, geom.f, geom.s, out_h, out_w)

    wa = layer.weights.array
    w_mat = wa.reshape(-1, geom.k)  # [F*F*Din, K]
    y = patches @ w_mat + layer.bias.array
    y = y.reshape(out_h, out_w, geom.k)

    cache = ConvCache(patches, x.dims, (out_h, out_w, geom.k), geom,
                      layer.in_depth, wa)
    return Tensor(y, dtype=y.dtype), cache


def conv_backward(d_y: Tensor, cache: ConvCache) -> LayerGradients:
    """Exact gradients of conv_forward w.r.t. input, weights, and bias."""
    if d_y.dims != cache.out_dims:
        raise ShapeMismatchError(
            f"upstream gradient must be {cache.out_dims}, got {d_y.dims}")
    out_h, out_w, k = cache.out_dims
    geom = cache.geom
    f, s, p = geom.f, geom.s, geom.p
    h, w, din = cache.x_dims

    dy_mat = d_y.array.reshape(out_h * out_w, k)
    d_bias = dy_mat.sum(axis=0)
    d_w = (cache.patches.T @ dy_mat).reshape(f, f, din, k)

    w_mat = cache.weights.reshape(-1, k)
    d_patches = (dy_mat @ w_mat.T).reshape(out_h, out_w, f, f, din)

    d_xp = np.zeros((h + 2 * p, w + 2 * p, din), dtype=d_patches.dtype)
    for fi in range(f):
        for fj in range(f):
            d_xp[fi:fi + s * out_h:s, fj:fj + s * out_w:s, :] += d_patches[:, :, fi, fj, :]
    d_x = d_xp[p:p + h, p:p + w, :] if p > 0 else d_xp

    return LayerGradients(Tensor(d_x, dtype=d_x.dtype),
                          Tensor(d_w, dtype=d_w.dtype),
                          Tensor(d_bias, dtype=d_bias.dtype))


# --- max pooling ---

@dataclass
class PoolCache:
    argmax: np.ndarray  # [H2, W2, D] flat index into each window
    x_dims: tuple[int, ...]
    out_dims: tuple[int, ...]
    window: int
    stride: int


def maxpool_forward(x: Tensor, layer: PoolLayer) -> tuple[Tensor, PoolCache]:
    """Per-window, per-channel maximum; ties keep the lowest flat index."""
    if x.shape.rank != 3:
        raise ShapeMismatchError(f"expected input [H,W,D], got {x.dims}")
    h, w, d = x.dims
    win, s = layer.window, layer.stride
    if h < win or w < win or (h - win) % s != 0 or (w - win) % s != 0:
        raise ShapeMismatchError(
            f"window {win}/stride {s} does not tile input {h}x{w}")
    out_h = (h - win) // s + 1
    out_w = (w - win) // s + 1

    windows = sliding_window_view(x.array, (win, win), axis=(0, 1))[::s, ::s]
    flat = windows.reshape(out_h, out_w, d, win * win)
    # np.argmax takes the first occurrence, i.e. the lowest flat index
    argmax = flat.argmax(axis=3)
    y = np.take_along_axis(flat, argmax[..., None], axis=3)[..., 0]

    cache = PoolCache(argmax, x.dims, (out_h, out_w, d), win, s)
    return Tensor(y, dtype=y.dtype), cache


def maxpool_backward(d_y: Tensor, cache: PoolCache) -> LayerGradients:
    """Route each upstream gradient entirely to its window's argmax."""
    if d_y.dims != cache.out_dims:
        raise ShapeMismatchError(
            f"upstream gradient must be {cache.out_dims}, got {d_y.dims}")
    out_h, out_w, d = cache.out_dims
    win, s = cache.window, cache.stride

    ii, jj, dd = np.meshgrid(np.arange(out_h), np.arange(out_w),
                             np.arange(d), indexing="ij")
    rows = ii * s + cache.argmax // win
    cols = jj * s + cache.argmax % win

    d_x = np.zeros(cache.x_dims, dtype=d_y.dtype)
    # windows may overlap when stride < window, so accumulate
    np.add.at(d_x, (rows.ravel(), cols.ravel(), dd.ravel()), d_y.array.ravel())
    return LayerGradients(Tensor(d_x, dtype=d_x.dtype))


# --- relu ---

def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return Tensor(np.maximum(x.array, 0), dtype=x.dtype)


def relu_backward(d_y: Tensor, x: Tensor) -> Tensor:
    """Pass d_y where x > 0; zero where x <= 0 (subgradient 0 at 0)."""
    if d_y.dims != x.dims:
        raise ShapeMismatchError(f"gradient {d_y.dims} vs input {x.dims}")
    return Tensor(np.where(x.array > 0, d_y.array, 0), dtype=d_y.dtype)


# --- dense ---

@dataclass
class DenseCache:
    x: np.ndarray
    weights: np.ndarray


def dense_forward(x: Tensor, layer: DenseLayer) -> tuple[Tensor, DenseCache]:
    """y = x W + b for a rank-1 input."""
    if x.dims != (layer.in_units,):
        raise ShapeMismatchError(
            f"expected input [{layer.in_units}], got {x.dims}")
    y = x.array @ layer.weights.array + layer.bias.array
    return Tensor(y, dtype=y.dtype), DenseCache(x.array, layer.weights.array)


def dense_backward(d_y: Tensor, cache: DenseCache) -> LayerGradients:
    """d_W = x outer d_y; d_b = d_y; d_x = W d_y."""
    if d_y.dims != (cache.weights.shape[1],):
        raise ShapeMismatchError(
            f"upstream gradient must be [{cache.weights.shape[1]}], got {d_y.dims}")
    dy = d_y.array
    d_w = np.outer(cache.x, dy)
    d_x = cache.weights @ dy
    return LayerGradients(Tensor(d_x, dtype=d_x.dtype),
                          Tensor(d_w, dtype=d_w.dtype),
                          Tensor(dy, dtype=dy.dtype))


# --- dropout ---

def dropout_forward(x: Tensor, layer: DropoutLayer,
                    rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
    """Returns (y, mask) with mask entries in {0, 1/keep_prob}.

    Infer mode is the exact identity (mask of ones). Train mode draws the
    mask from the passed generator; backward is d_x = d_y * mask.
    """
    if layer.mode is Mode.INFER:
        ones = np.ones(x.dims, dtype=x.dtype)
        return x, Tensor(ones, dtype=x.dtype)
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = layer.keep_prob
    mask = (rng.random(x.dims) < keep).astype(x.dtype) / keep
    y = x.array * mask
    return Tensor(y, dtype=y.dtype), Tensor(mask, dtype=mask.dtype)


# --- softmax ---

def softmax(x: Tensor) -> Tensor:
    """exp(x - max(x)) normalized to sum 1; the shift prevents overflow."""
    shifted = x.array - x.array.max()
    e = np.exp(shifted)
    return Tensor(e / e.sum(), dtype=e.dtype)


def softmax_backward(d_y: Tensor, y: Tensor) -> Tensor:
    """Jacobian-vector product through softmax given its output y."""
    if d_y.dims != y.dims:
        raise ShapeMismatchError(f"gradient {d_y.dims} vs output {y.dims}")
    ya, dy = y.array, d_y.array
    d_x = ya * (dy - np.dot(dy, ya))
    return Tensor(d_x, dtype=d_x.dtype)
