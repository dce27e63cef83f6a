"""Shared test utilities: independent reference implementations (kept
deliberately naive so they stay a separate route from the engine's
vectorized kernels), finite-difference machinery, and fixture writers.
"""

from __future__ import annotations

import numpy as np

from bellcnn import Tensor

EPS = 1e-5


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    """Relative error with a floor so finite-difference noise on near-zero
    entries does not blow up the ratio."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(f, arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. every entry of arr."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray,
                floor: float = 1e-6) -> float:
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    return max(rel_err(float(x), float(y), floor) for x, y in zip(a, n))


# --- naive references ---

def conv2d_reference(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                     stride: int, pad: int) -> np.ndarray:
    """Direct per-window summation; x [H,W,D], weights [F,F,D,K]."""
    h, w, d = x.shape
    f, _, _, k = weights.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    out_h = (h - f + 2 * pad) // stride + 1
    out_w = (w - f + 2 * pad) // stride + 1
    y = np.zeros((out_h, out_w, k))
    for i in range(out_h):
        for j in range(out_w):
            for kk in range(k):
                acc = bias[kk]
                for fi in range(f):
                    for fj in range(f):
                        for c in range(d):
                            acc += xp[i * stride + fi, j * stride + fj, c] \
                                * weights[fi, fj, c, kk]
                y[i, j, kk] = acc
    return y


def maxpool_reference(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    h, w, d = x.shape
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    y = np.zeros((out_h, out_w, d))
    for i in range(out_h):
        for j in range(out_w):
            for c in range(d):
                y[i, j, c] = x[i * stride:i * stride + window,
                               j * stride:j * stride + window, c].max()
    return y


def adam_reference(x0: float, grad_fn, steps: int, alpha=0.001, beta1=0.9,
                   beta2=0.999, eps=1e-8) -> list[float]:
    """Scalar Adam trajectory written out longhand, independent of the
    engine's implementation."""
    x = x0
    m = 0.0
    v = 0.0
    trajectory = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - alpha * m_hat / (np.sqrt(v_hat) + eps)
        trajectory.append(x)
    return trajectory


def param_count_reference(input_w: int, input_h: int, input_depth: int,
                          kernel: int, filters, fc_units: int,
                          num_classes: int) -> tuple[int, list[int]]:
    """Closed-form audit: conv = F*F*Din*K + K, dense = in*out + out."""
    per_layer = []
    d = input_depth
    h, w = input_h, input_w
    for k in filters:
        per_layer.append(kernel * kernel * d * k + k)
        d = k
        h //= 2
        w //= 2
    flat = h * w * d
    per_layer.append(flat * fc_units + fc_units)
    per_layer.append(fc_units * num_classes + num_classes)
    return sum(per_layer), per_layer


# --- fixture writers ---

def write_pgm(path, pixels: np.ndarray, comment: str | None = None):
    """Write an 8-bit binary PGM; pixels are uint8 [H, W]."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    header = b"P5\n"
    if comment:
        header += b"# " + comment.encode() + b"\n"
    header += f"{w} {h}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + pixels.tobytes())


def class_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Synthetic separable pattern: controls are dark with a bright corner
    block, positives bright with a dark center block; plus mild noise."""
    if label == 0:
        img = rng.integers(0, 60, size=(size, size))
        img[: size // 4, : size // 4] = 230
    else:
        img = rng.integers(180, 250, size=(size, size))
        q = size // 4
        img[q: 3 * q, q: 3 * q] = 20
    return img.astype(np.uint8)


def tensor_from_pixels(pixels: np.ndarray) -> Tensor:
    return Tensor(pixels.astype(np.float64)[:, :, None] / 255.0)


def demographics_rows() -> list[tuple[str, int, str]]:
    """Deterministic 416-subject cohort matching the demented-demographics
    marginals: 100 demented split 70/28/2 by CDR 0.5/1/2 and 15/48/32/5 by
    age band, plus 98 elderly controls (CDR 0) and 218 young subjects with
    no rating."""
    bands = [
        ((60, 69), [("0.5", 12), ("1", 3)]),
        ((70, 79), [("0.5", 32), ("1", 15), ("2", 1)]),
        ((80, 89), [("0.5", 22), ("1", 9), ("2", 1)]),
        ((90, 96), [("0.5", 4), ("1", 1)]),
    ]
    rows = []
    n = 0
    for (lo, hi), cdrs in bands:
        for cdr, count in cdrs:
            for i in range(count):
                n += 1
                age = lo + (i % (hi - lo + 1))
                rows.append((f"SUBJ_{n:04d}", age, cdr))
    for i in range(98):
        n += 1
        rows.append((f"SUBJ_{n:04d}", 60 + (i % 37), "0"))
    for i in range(218):
        n += 1
        rows.append((f"SUBJ_{n:04d}", 18 + (i % 42), ""))
    return rows


def write_demographics_csv(path):
    rows = demographics_rows()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("ID,Age,CDR,MMSE,Sex\n")
        for i, (sid, age, cdr) in enumerate(rows):
            mmse = "" if cdr == "" and i % 3 == 0 else str(20 + (i % 10))
            sex = "F" if i % 2 else "M"
            fh.write(f"{sid},{age},{cdr},{mmse},{sex}\n")
    return rows
