"""``OFL1`` binary container for parameter vectors and masks.

Layout (all integers little-endian)::

    b"OFL1"
    u32   segment count
    per segment: u32 layer_id, u8 kind (0 conv, 1 dense),
                 u32 in_channels, u32 out_channels, u32 kernel
    u8    payload type (0 = f32 values, 1 = bit-packed mask)
    payload: f32 values, or packbits(mask, bitorder="little")
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import LayerShape, ParamVector

MAGIC = b"OFL1"
_KINDS = {"conv": 0, "dense": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}
_SEG = struct.Struct("<IBIII")

PAYLOAD_F32 = 0
PAYLOAD_BITS = 1


class CheckpointError(ValueError):
    pass


def _header(segments) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(segments))]
    for s in segments:
        parts.append(_SEG.pack(s.layer_id, _KINDS[s.kind], s.in_channels, s.out_channels, s.kernel))
    return b"".join(parts)


def _read_header(buf: bytes):
    if buf[:4] != MAGIC:
        raise CheckpointError("not an OFL1 file")
    try:
        (count,) = struct.unpack_from("<I", buf, 4)
        off = 8
        segments = []
        for _ in range(count):
            lid, kind, cin, cout, k = _SEG.unpack_from(buf, off)
            off += _SEG.size
            if kind not in _KIND_NAMES:
                raise CheckpointError(f"unknown layer kind code {kind}")
            segments.append(LayerShape(lid, _KIND_NAMES[kind], cin, cout, k))
        payload_type = buf[off]
    except (struct.error, IndexError) as exc:
        raise CheckpointError("truncated header") from exc
    return tuple(segments), payload_type, off + 1


def dumps_params(params: ParamVector) -> bytes:
    body = params.values.astype("<f4").tobytes()
    return _header(params.segments) + bytes([PAYLOAD_F32]) + body


def loads_params(buf: bytes) -> ParamVector:
    segments, ptype, off = _read_header(buf)
    if ptype != PAYLOAD_F32:
        raise CheckpointError("file holds a mask, not parameters")
    total = sum(s.param_count for s in segments)
    if off + 4 * total != len(buf):
        raise CheckpointError("payload length does not match the segment table")
    values = np.frombuffer(buf, dtype="<f4", count=total, offset=off)
    return ParamVector(segments, values.astype(np.float32))


def dumps_mask(segments, bits: np.ndarray) -> bytes:
    packed = np.packbits(bits.astype(np.uint8), bitorder="little")
    return _header(segments) + bytes([PAYLOAD_BITS]) + packed.tobytes()


def loads_mask(buf: bytes):
    segments, ptype, off = _read_header(buf)
    if ptype != PAYLOAD_BITS:
        raise CheckpointError("file holds parameters, not a mask")
    total = sum(s.param_count for s in segments)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, offset=off), bitorder="little")
    if bits.size < total:
        raise CheckpointError("mask payload too short")
    return segments, bits[:total].astype(np.uint8)


def save_params(path: Path | str, params: ParamVector) -> None:
    Path(path).write_bytes(dumps_params(params))


def load_params(path: Path | str) -> ParamVector:
    return loads_params(Path(path).read_bytes())


def save_mask(path: Path | str, segments, bits: np.ndarray) -> None:
    Path(path).write_bytes(dumps_mask(segments, bits))


def load_mask(path: Path | str):
    return loads_mask(Path(path).read_bytes())
