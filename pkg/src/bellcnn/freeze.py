"""Byte-exact serialization of a trained graph to the BCNN container.

Layout: magic ``BCNN``, u32 LE version (1), u32 LE descriptor length,
UTF-8 descriptor (one layer per line, ``kind key=value ...``), per-layer
little-endian float32 weight blobs in descriptor order, and a trailing
u32 LE CRC-32 over everything before it.

Weights are stored at 32-bit; training precision is 64-bit, so freezing
rounds once. Thawed graphs evaluate at the stored precision and are
inference-only.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    DescriptorBlobMismatchError,
    IoFailureError,
    NonFiniteParameterError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .layers import ConvLayer, DenseLayer, DropoutLayer, Mode, PoolLayer
from .model import ACT_NONE, GraphLayer, ModelGraph
from .tensor import ConvGeometry, Tensor

MAGIC = b"BCNN"
FORMAT_VERSION = 1


def _shape_token(dims) -> str:
    return "x".join(str(d) for d in dims)


def _parse_shape(token: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(part) for part in token.split("x"))
    except ValueError:
        raise DescriptorBlobMismatchError(f"bad shape token {token!r}") from None
    if not dims or any(d < 1 for d in dims):
        raise DescriptorBlobMismatchError(f"bad shape token {token!r}")
    return dims


def _describe(rec: GraphLayer) -> str:
    ins = _shape_token(rec.in_shape)
    outs = _shape_token(rec.out_shape)
    if rec.kind == "conv":
        g = rec.layer.geom
        return (f"conv k={g.k} f={g.f} s={g.s} p={g.p} "
                f"in={ins} out={outs} act={rec.activation}")
    if rec.kind == "pool":
        return f"pool f={rec.layer.window} s={rec.layer.stride} in={ins} out={outs}"
    if rec.kind == "flatten":
        return f"flatten in={ins} out={outs}"
    if rec.kind == "dense":
        return f"dense in={ins} out={outs} act={rec.activation}"
    if rec.kind == "dropout":
        return f"dropout p={rec.layer.keep_prob!r} in={ins} out={outs}"
    raise ValueError(f"unknown layer kind {rec.kind!r}")


def graph_descriptor(g: ModelGraph) -> str:
    """The container's text descriptor: one line per layer."""
    return "".join(_describe(rec) + "\n" for rec in g.layers)


def _blob(rec: GraphLayer) -> bytes:
    if rec.kind in ("conv", "dense"):
        w = rec.layer.weights.array.astype("<f4").tobytes()
        b = rec.layer.bias.array.astype("<f4").tobytes()
        return w + b
    return b""


def freeze(g: ModelGraph, path) -> int:
    """Write the graph to `path`; returns the container's CRC-32."""
    for _, name, tensor in g.parameters():
        if not np.isfinite(tensor.array).all():
            raise NonFiniteParameterError(f"parameter {name} holds NaN/Inf")
    desc = graph_descriptor(g).encode("utf-8")
    body = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(desc))
    body += desc
    for rec in g.layers:
        body += _blob(rec)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    try:
        Path(path).write_bytes(body + struct.pack("<I", crc))
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc
    return crc


def _parse_fields(line: str, line_num: int) -> tuple[str, dict[str, str]]:
    parts = line.split()
    if not parts:
        raise DescriptorBlobMismatchError(f"line {line_num}: empty layer record")
    fields = {}
    for part in parts[1:]:
        if "=" not in part:
            raise DescriptorBlobMismatchError(
                f"line {line_num}: malformed field {part!r}")
        key, value = part.split("=", 1)
        fields[key] = value
    return parts[0], fields


def _rebuild_layer(kind: str, fields: dict[str, str], line_num: int,
                   payload: memoryview, offset: int) -> tuple[GraphLayer, int]:
    """Reconstruct one layer record, consuming its blob from `payload`."""
    def need(key):
        if key not in fields:
            raise DescriptorBlobMismatchError(
                f"line {line_num}: {kind} record missing {key}=")
        return fields[key]

    def take(count: int, dims) -> Tensor:
        nonlocal offset
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise DescriptorBlobMismatchError(
                f"line {line_num}: blob for {kind} overruns the payload")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4")
        offset += nbytes
        return Tensor(arr.reshape(dims), dtype=np.float32)

    in_shape = _parse_shape(need("in"))
    out_shape = _parse_shape(need("out"))
    act = fields.get("act", ACT_NONE)

    if kind == "conv":
        geom = ConvGeometry(k=int(need("k")), f=int(need("f")),
                            s=int(need("s")), p=int(need("p")))
        din = in_shape[2]
        weights = take(geom.f * geom.f * din * geom.k, (geom.f, geom.f, din, geom.k))
        bias = take(geom.k, (geom.k,))
        layer = ConvLayer(geom, din, weights, bias)
    elif kind == "pool":
        layer = PoolLayer(window=int(need("f")), stride=int(need("s")))
    elif kind == "flatten":
        layer = None
    elif kind == "dense":
        n_in, n_out = in_shape[0], out_shape[0]
        weights = take(n_in * n_out, (n_in, n_out))
        bias = take(n_out, (n_out,))
        layer = DenseLayer(n_in, n_out, weights, bias)
    elif kind == "dropout":
        layer = DropoutLayer(float(need("p")))
    else:
        raise DescriptorBlobMismatchError(f"line {line_num}: unknown kind {kind!r}")

    return GraphLayer(kind, in_shape, out_shape, layer, act), offset


def thaw(path) -> ModelGraph:
    """Load a BCNN container as an inference-only graph at 32-bit precision."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc

    if len(data) < 4:
        raise TruncatedFileError(f"{path}: {len(data)} bytes is too short")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: magic {data[:4]!r} is not {MAGIC!r}")
    if len(data) < 16:
        raise TruncatedFileError(f"{path}: too short for a container header")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version} not supported")
    desc_len = struct.unpack_from("<I", data, 8)[0]
    if 12 + desc_len + 4 > len(data):
        raise TruncatedFileError(f"{path}: descriptor overruns the file")

    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumMismatchError(
            f"{path}: CRC {stored_crc:08x} != computed {actual_crc:08x}")

    desc = data[12:12 + desc_len].decode("utf-8")
    payload = memoryview(data)[12 + desc_len:len(data) - 4]

    records = []
    offset = 0
    for line_num, line in enumerate(desc.splitlines(), start=1):
        if not line.strip():
            continue
        kind, fields = _parse_fields(line, line_num)
        rec, offset = _rebuild_layer(kind, fields, line_num, payload, offset)
        records.append(rec)
    if offset != len(payload):
        raise DescriptorBlobMismatchError(
            f"{path}: payload holds {len(payload)} bytes, descriptor "
            f"declares {offset}")
    if not records:
        raise DescriptorBlobMismatchError(f"{path}: descriptor declares no layers")

    input_shape = records[0].in_shape
    num_classes = records[-1].out_shape[0]
    return ModelGraph(records, Mode.INFER, seed=0, input_shape=input_shape,
                      num_classes=num_classes, dtype=np.dtype(np.float32),
                      frozen=True)
