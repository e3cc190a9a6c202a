"""Binary checkpoint envelope for embedding tables and convolution parameters.

Layout (all little-endian)::

    b"KQGC" | u64 version | payload

Embedding table payload: ``u64 N, u64 R, u64 H`` then N*H entity floats and
R*H relation floats (float64, row-major).

Parameter payload: ``u64 num_layers`` then per layer
``u64 H_out, u64 H_in, u64 aggregator, u64 normalization, u64 has_a,
f64 leaky_slope`` followed by W (H_out*H_in), b (H_out) and, when present,
a (2*H_in).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .transe import EmbeddingTable

MAGIC = b"KQGC"
VERSION = 1

_AGGREGATORS = ("mean", "attn_dot", "attn_learned")
_NORMALIZATIONS = ("ratio", "softmax")


class CheckpointFormatError(ValueError):
    pass


def _header(version: int = VERSION) -> bytes:
    return MAGIC + struct.pack("<Q", version)


def _check_header(buf: bytes, path) -> int:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<Q", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version} (expected {VERSION})")
    return 12


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_embeddings(emb: EmbeddingTable, path, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, h = emb.entities.shape
    r = emb.relations.shape[0]
    buf = _header() + struct.pack("<QQQ", n, r, h) + _f64(emb.entities) + _f64(emb.relations)
    path.write_bytes(buf)
    if config is not None:
        write_sidecar(path, config)
    return path


def load_embeddings(path) -> EmbeddingTable:
    buf = Path(path).read_bytes()
    off = _check_header(buf, path)
    if len(buf) < off + 24:
        raise CheckpointFormatError(f"{path}: truncated header")
    n, r, h = struct.unpack_from("<QQQ", buf, off)
    off += 24
    expected = off + 8 * h * (n + r)
    if len(buf) != expected:
        raise CheckpointFormatError(f"{path}: size {len(buf)} does not match header (expected {expected})")
    data = np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64)
    ent = data[: n * h].reshape(n, h)
    rel = data[n * h:].reshape(r, h)
    return EmbeddingTable(ent, rel)


def save_params(params, path, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [_header(), struct.pack("<Q", len(params.layers))]
    for lp in params.layers:
        h_out, h_in = lp.W.shape
        has_a = lp.a is not None
        parts.append(struct.pack(
            "<QQQQQd", h_out, h_in, _AGGREGATORS.index(lp.aggregator),
            _NORMALIZATIONS.index(lp.normalization), int(has_a), lp.leaky_slope,
        ))
        parts += [_f64(lp.W), _f64(lp.b)]
        if has_a:
            parts.append(_f64(lp.a))
    path.write_bytes(b"".join(parts))
    if config is not None:
        write_sidecar(path, config)
    return path


def load_params(path):
    from .conv import KqgcParams, LayerParams

    buf = Path(path).read_bytes()
    off = _check_header(buf, path)
    try:
        (num_layers,) = struct.unpack_from("<Q", buf, off)
        off += 8
        layers = []
        for _ in range(num_layers):
            h_out, h_in, agg, norm, has_a, slope = struct.unpack_from("<QQQQQd", buf, off)
            off += 48
            if agg >= len(_AGGREGATORS) or norm >= len(_NORMALIZATIONS) or has_a > 1:
                raise CheckpointFormatError(f"{path}: bad layer header")
            W = _read(buf, off, h_out * h_in).reshape(h_out, h_in)
            off += 8 * h_out * h_in
            b = _read(buf, off, h_out)
            off += 8 * h_out
            a = None
            if has_a:
                a = _read(buf, off, 2 * h_in)
                off += 16 * h_in
            layers.append(LayerParams(W, b, _AGGREGATORS[agg], a, slope, _NORMALIZATIONS[norm]))
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated parameter file") from exc
    if off != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - off} trailing bytes")
    return KqgcParams(layers)


def _read(buf: bytes, off: int, count: int) -> np.ndarray:
    if off + 8 * count > len(buf):
        raise CheckpointFormatError("truncated parameter file")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def write_sidecar(path, config: dict) -> None:
    lines = [f"{k} = {v}" for k, v in config.items()]
    sidecar_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path) -> dict[str, str]:
    p = sidecar_path(path)
    if not p.exists():
        return {}
    out = {}
    for line in p.read_text(encoding="utf-8").splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
