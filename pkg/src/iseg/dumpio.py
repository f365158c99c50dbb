"""Bit-exact binary container for attention dumps.

Layout (all integers little-endian):

    magic[8] = "ISEGATTN"
    version  u32
    header_len u32
    header JSON (UTF-8, sorted keys, compact separators)
    raw tensor payload (float32 little-endian, row-major, concatenated)

The header carries image metadata, token metadata, per-layer cross
attention records and a tensor directory (name/shape/offset/length,
offsets relative to the payload start). Files are platform independent:
fixed endianness, no padding.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .attn import (
    CrossAttentionStack,
    SelfAttentionMap,
    ShapeError,
    TokenMeta,
    category_enhanced_attention,
)

MAGIC = b"ISEGATTN"
VERSION = 1

DEFAULT_TIMESTEP = 100

# producers may store reduced-precision tensors; row sums are checked
# at a looser tolerance than freshly computed maps
ROW_SUM_ATOL = 1e-3


class DumpFormatError(ValueError):
    """Malformed container: bad magic, version, truncation, shape lies."""


class DumpValidationError(ValueError):
    """Structurally sound container with invalid tensor content."""


@dataclass
class CrossLayerRecord:
    """Stored query/key block of one cross-attention layer."""

    resolution: tuple[int, int]
    q: np.ndarray  # (H_l*W_l, dim) float32
    k: np.ndarray  # (T, dim) float32
    d: float

    def __post_init__(self):
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        self.q = np.ascontiguousarray(self.q, dtype=np.float32)
        self.k = np.ascontiguousarray(self.k, dtype=np.float32)
        self.d = float(self.d)
        h, w = self.resolution
        if self.q.ndim != 2 or self.q.shape[0] != h * w:
            raise ShapeError(f"q must be ({h * w}, dim), got {self.q.shape}")
        if self.k.ndim != 2 or self.k.shape[1] != self.q.shape[1]:
            raise ShapeError(f"k {self.k.shape} incompatible with q {self.q.shape}")
        if self.d <= 0:
            raise ValueError("normalization factor d must be positive")


@dataclass
class AttnDump:
    """One image's worth of attention tensors plus token metadata."""

    image_id: str
    self_attention: SelfAttentionMap  # head-averaged, last decoder layer
    cross_layers: list[CrossLayerRecord]
    token_meta: TokenMeta
    timestep: int = DEFAULT_TIMESTEP
    pathway: str = "offline"  # or "embedding-scaling"
    gamma_applied: float = 1.0
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        self.image_id = str(self.image_id)
        self.timestep = int(self.timestep)
        if self.timestep < 1:
            raise ValueError("timestep must be >= 1")
        if self.pathway not in ("offline", "embedding-scaling"):
            raise ValueError(f"unknown pathway {self.pathway!r}")
        self.gamma_applied = float(self.gamma_applied)
        if self.image_size is not None:
            self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if not self.cross_layers:
            raise ValueError("dump needs at least one cross-attention layer")
        t = self.token_meta.token_count
        for i, layer in enumerate(self.cross_layers):
            if layer.k.shape[0] != t:
                raise ShapeError(
                    f"cross layer {i} has {layer.k.shape[0]} key rows, prompt has {t} tokens")
        top = max((l.resolution for l in self.cross_layers), key=lambda r: r[0] * r[1])
        sh, sw = self.self_attention.side
        if sh * sw < top[0] * top[1]:
            raise ShapeError(
                f"self-attention at {self.self_attention.side} is below the "
                f"highest cross-attention level {top}")

    @property
    def working_resolution(self) -> tuple[int, int]:
        return self.self_attention.side


def _token_meta_json(meta: TokenMeta) -> dict:
    return {
        "tokens": list(meta.tokens),
        "category_indices": sorted(meta.category_indices),
        "background_indices": sorted(meta.background_indices),
        "gamma": meta.gamma,
        "category_groups": [list(g) for g in meta.category_groups]
        if meta.category_groups is not None else None,
    }


def _token_meta_from_json(obj: dict) -> TokenMeta:
    return TokenMeta(
        tokens=tuple(obj["tokens"]),
        category_indices=frozenset(obj["category_indices"]),
        background_indices=frozenset(obj.get("background_indices", ())),
        gamma=obj.get("gamma", 1.0),
        category_groups=tuple(tuple(g) for g in obj["category_groups"])
        if obj.get("category_groups") else None,
    )


def write_dump(dump: AttnDump, sink: BinaryIO) -> None:
    """Serialize a dump; writing then reading yields an equal structure."""
    tensors: list[tuple[str, np.ndarray]] = [
        ("self_attention", np.ascontiguousarray(dump.self_attention.data, dtype=np.float32)),
    ]
    cross_meta = []
    for i, layer in enumerate(dump.cross_layers):
        qn, kn = f"cross_q_{i}", f"cross_k_{i}"
        tensors.append((qn, layer.q))
        tensors.append((kn, layer.k))
        cross_meta.append({
            "resolution": list(layer.resolution),
            "d": layer.d,
            "q": qn,
            "k": kn,
        })

    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        raw = arr.astype("<f4", copy=False).tobytes(order="C")
        directory.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)

    header = {
        "image_id": dump.image_id,
        "timestep": dump.timestep,
        "pathway": dump.pathway,
        "gamma_applied": dump.gamma_applied,
        "image_size": list(dump.image_size) if dump.image_size else None,
        "self_resolution": list(dump.self_attention.side),
        "working_resolution": list(dump.working_resolution),
        "token_meta": _token_meta_json(dump.token_meta),
        "cross_layers": cross_meta,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    sink.write(MAGIC)
    sink.write(struct.pack("<I", VERSION))
    sink.write(struct.pack("<I", len(header_bytes)))
    sink.write(header_bytes)
    for raw in blobs:
        sink.write(raw)


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise DumpFormatError(
            f"truncated stream: wanted {n} bytes for {what}, got {len(data)}")
    return data


def read_dump(source: BinaryIO) -> AttnDump:
    """Parse and validate a dump written by :func:`write_dump`."""
    magic = _read_exact(source, len(MAGIC), "magic")
    if magic != MAGIC:
        raise DumpFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(source, 4, "version"))
    if version != VERSION:
        raise DumpFormatError(f"unsupported container version {version}")
    (header_len,) = struct.unpack("<I", _read_exact(source, 4, "header length"))
    try:
        header = json.loads(_read_exact(source, header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DumpFormatError(f"header is not valid JSON: {exc}") from exc

    payload = source.read()
    arrays: dict[str, np.ndarray] = {}
    end = 0
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset, length = int(entry["offset"]), int(entry["length"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if length != expected:
            raise DumpFormatError(
                f"tensor {name!r}: declared length {length} does not match "
                f"shape {shape} ({expected} bytes)")
        if offset + length > len(payload):
            raise DumpFormatError(
                f"truncated stream: tensor {name!r} needs bytes up to "
                f"{offset + length}, payload has {len(payload)}")
        arr = np.frombuffer(payload[offset:offset + length], dtype="<f4").reshape(shape)
        if not np.isfinite(arr).all():
            raise DumpValidationError(f"tensor {name!r} contains NaN or Inf")
        arrays[name] = arr
        end = max(end, offset + length)
    if len(payload) != end:
        raise DumpFormatError(
            f"payload has {len(payload)} bytes, directory accounts for {end}")

    if "self_attention" not in arrays:
        raise DumpFormatError("missing tensor 'self_attention'")
    self_res = tuple(header["self_resolution"])
    sa = SelfAttentionMap(arrays["self_attention"], self_res)
    row_err = np.abs(sa.data.sum(axis=1) - 1.0).max()
    if row_err > ROW_SUM_ATOL:
        raise DumpValidationError(
            f"self-attention rows deviate from sum 1 by {row_err:.3g} "
            f"(tolerance {ROW_SUM_ATOL})")
    if tuple(header["working_resolution"]) != self_res:
        raise DumpValidationError(
            f"working resolution {header['working_resolution']} does not match "
            f"self-attention resolution {list(self_res)}")

    layers = []
    for entry in header["cross_layers"]:
        try:
            q, k = arrays[entry["q"]], arrays[entry["k"]]
        except KeyError as exc:
            raise DumpFormatError(f"cross layer references missing tensor {exc}") from exc
        layers.append(CrossLayerRecord(
            resolution=tuple(entry["resolution"]), q=q, k=k, d=entry["d"],
        ))

    return AttnDump(
        image_id=header["image_id"],
        self_attention=sa,
        cross_layers=layers,
        token_meta=_token_meta_from_json(header["token_meta"]),
        timestep=header["timestep"],
        pathway=header["pathway"],
        gamma_applied=header["gamma_applied"],
        image_size=tuple(header["image_size"]) if header.get("image_size") else None,
    )


def write_dump_file(dump: AttnDump, path) -> None:
    with open(path, "wb") as fh:
        write_dump(dump, fh)


def read_dump_file(path) -> AttnDump:
    with open(path, "rb") as fh:
        return read_dump(fh)


def bilinear_resize(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of an (H, W, ...) grid, corners not aligned.

    Output pixel centers map to input coordinates via
    ``src = (i + 0.5) * in/out - 0.5`` (the half-pixel convention), so
    resizing to the same resolution is an exact identity.
    """
    in_h, in_w = grid.shape[:2]
    out_h, out_w = out_hw

    def axis_weights(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        return i0, i1, frac

    r0, r1, rf = axis_weights(in_h, out_h)
    c0, c1, cf = axis_weights(in_w, out_w)
    rf = rf.reshape(-1, *([1] * (grid.ndim - 1)))
    rows = grid[r0] * (1.0 - rf) + grid[r1] * rf
    cf = cf.reshape(1, -1, *([1] * (grid.ndim - 2)))
    return rows[:, c0] * (1.0 - cf) + rows[:, c1] * cf


def fuse_cross_attention(dump: AttnDump, meta: TokenMeta,
                         levels: set[tuple[int, int]] | None = None) -> CrossAttentionStack:
    """Compute, upsample and average per-layer cross-attention maps.

    Each selected layer's map is recomputed from its stored Q/K with the
    category weighting from ``meta`` (the offline enhancement pathway),
    bilinearly upsampled to the working resolution, and averaged across
    layers. Fused rows are non-negative but need not sum to 1.
    """
    available = {l.resolution for l in dump.cross_layers}
    if levels is None:
        levels = available
    else:
        levels = {tuple(l) for l in levels}
        missing = levels - available
        if missing:
            raise ValueError(
                f"requested level(s) {sorted(missing)} not in dump "
                f"(available: {sorted(available)})")
    selected = [l for l in dump.cross_layers if l.resolution in levels]
    work_h, work_w = dump.working_resolution
    t = dump.token_meta.token_count
    per_layer: list[tuple[tuple[int, int], np.ndarray]] = []
    fused = np.zeros((work_h * work_w, t), dtype=np.float64)
    for layer in selected:
        amap = category_enhanced_attention(
            layer.q.astype(np.float64), layer.k.astype(np.float64), meta, layer.d)
        per_layer.append((layer.resolution, amap))
        h, w = layer.resolution
        up = bilinear_resize(amap.reshape(h, w, t), (work_h, work_w))
        fused += up.reshape(work_h * work_w, t)
    fused /= len(selected)
    return CrossAttentionStack(layers=per_layer, fused=fused, token_count=t)
