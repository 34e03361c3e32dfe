"""Model checkpoint container.

Layout: magic ``AXCK``, u32 format version, u64 header length, a UTF-8 JSON
header (architecture spec, normalization-stats reference, fixed constants,
optional penalty state), then one raw block per parameter tensor in
declaration order. Each block is u32 axis count, u32 extents, then
little-endian float32 data. Loading restores float64 arrays, so a
round-trip reproduces eval-mode outputs to within float32 rounding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import BN_EPS, BN_MOMENTUM, DTYPE
from .models import (
    ArchitectureSpec,
    ConvParams,
    FixedFeatureParams,
    FIXED_BANK_SIZE,
    LinearParams,
    ModelParams,
)

MAGIC = b"AXCK"
FORMAT_VERSION = 1

CONSTANTS = {
    "bn_eps": BN_EPS,
    "bn_momentum": BN_MOMENTUM,
    "fixed_bank_size": FIXED_BANK_SIZE,
}


class CheckpointError(ValueError):
    """Malformed, truncated, or mismatched checkpoint file."""


@dataclass
class Checkpoint:
    spec: ArchitectureSpec
    params: ModelParams
    norm_stats: Optional[dict] = None
    penalty_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    constants: dict = field(default_factory=lambda: dict(CONSTANTS))


def _layer_blocks(layer) -> list:
    if isinstance(layer, ConvParams):
        blocks = [layer.w, layer.b]
        if layer.bn_scale is not None:
            blocks += [layer.bn_scale, layer.bn_shift, layer.bn_mean, layer.bn_var]
        return blocks
    if isinstance(layer, LinearParams):
        return [layer.w, layer.b]
    if isinstance(layer, FixedFeatureParams):
        return [layer.omega, layer.b]
    raise TypeError(f"unknown layer params {type(layer)!r}")


def _layer_descr(layer) -> dict:
    if isinstance(layer, ConvParams):
        return {
            "kind": "conv",
            "batchnorm": layer.bn_scale is not None,
            "bn_ready": bool(layer.bn_ready),
        }
    if isinstance(layer, LinearParams):
        return {"kind": "linear"}
    return {"kind": "fixed_feature"}


def save_checkpoint(path, spec: ArchitectureSpec, params: ModelParams, *,
                    norm_stats: Optional[dict] = None,
                    penalty_state: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "arch": spec.to_dict(),
        "constants": dict(CONSTANTS),
        "layers": [_layer_descr(layer) for layer in params.layers],
        "norm_stats": norm_stats,
        "penalty_state": penalty_state,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for layer in params.layers:
            for arr in _layer_blocks(layer):
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_block(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    if ndim > 3:
        raise CheckpointError(f"parameter block with {ndim} axes")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    raw = _read_exact(fh, 4 * count)
    arr = np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise CheckpointError("non-finite parameter values in checkpoint")
    return arr


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError("bad magic; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        try:
            spec = ArchitectureSpec.from_dict(header["arch"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"invalid architecture in header: {exc}") from exc

        layers = []
        for descr in header.get("layers", []):
            kind = descr.get("kind")
            if kind == "conv":
                w, b = _read_block(fh), _read_block(fh)
                conv = ConvParams(w, b)
                if descr.get("batchnorm"):
                    conv.bn_scale = _read_block(fh)
                    conv.bn_shift = _read_block(fh)
                    conv.bn_mean = _read_block(fh)
                    conv.bn_var = _read_block(fh)
                    conv.bn_ready = bool(descr.get("bn_ready", False))
                layers.append(conv)
            elif kind == "linear":
                layers.append(LinearParams(_read_block(fh), _read_block(fh)))
            elif kind == "fixed_feature":
                layers.append(FixedFeatureParams(_read_block(fh), _read_block(fh)))
            else:
                raise CheckpointError(f"unknown layer kind {kind!r} in header")
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after parameter blocks")
    return Checkpoint(
        spec=spec,
        params=ModelParams(layers),
        norm_stats=header.get("norm_stats"),
        penalty_state=header.get("penalty_state"),
        extra=header.get("extra", {}),
        constants=header.get("constants", {}),
    )
