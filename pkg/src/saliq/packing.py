"""Bit-packed weight storage and the ``.ulbq`` checkpoint container.

Container layout (all integers little-endian)::

    b"ULBQ"  u32 version
    repeated records:
        u32 name_len, name (UTF-8)
        u8  bits          1..8 = packed integer codes, 32 = dense f32, 0 = JSON metadata
        u32 group_size    0 = one group for the whole tensor
        u32 rank, rank * u32 extents
        payload:
            codes:    n_groups * (f32 scale, f32 zero), then ceil(numel * bits / 8) code bytes
            dense:    numel * f32
            metadata: extents[0] bytes of UTF-8 JSON
        u32 CRC32 of everything above in this record

Codes are written as one little-endian bit stream, least significant bit
first: code ``i`` occupies stream bits ``[i * bits, (i + 1) * bits)``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quantizers import QuantSpec

MAGIC = b"ULBQ"
FORMAT_VERSION = 1
DENSE_BITS = 32
META_BITS = 0


class CorruptFileError(ValueError):
    pass


@dataclass
class PackedWeights:
    bits: int
    group_size: int | None
    shape: tuple[int, ...]
    scale: np.ndarray
    zero: np.ndarray
    payload: bytes

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def n_groups(self) -> int:
        if self.numel == 0:
            return 0
        return 1 if self.group_size is None else self.numel // self.group_size

    def nbytes(self) -> int:
        return len(self.payload) + 8 * self.n_groups


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    codes = np.asarray(codes).ravel()
    if codes.size and (codes.min() < 0 or codes.max() >= 2 ** bits):
        raise ValueError(f"codes out of range for {bits}-bit packing")
    if bits == 8:
        return codes.astype(np.uint8).tobytes()
    shifts = np.arange(bits, dtype=np.uint8)
    stream = ((codes.astype(np.uint8)[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(stream, bitorder="little").tobytes()


def unpack_codes(payload: bytes, bits: int, n: int) -> np.ndarray:
    expected = (n * bits + 7) // 8
    if len(payload) != expected:
        raise CorruptFileError(f"code stream has {len(payload)} bytes, expected {expected} "
                               f"for {n} codes at {bits} bits")
    raw = np.frombuffer(payload, dtype=np.uint8)
    if bits == 8:
        return raw.astype(np.int64)
    stream = np.unpackbits(raw, bitorder="little")[: n * bits].reshape(n, bits)
    return (stream.astype(np.int64) << np.arange(bits)).sum(axis=1)


def pack(codes: np.ndarray, spec: QuantSpec) -> PackedWeights:
    codes = np.asarray(codes)
    numel = codes.size
    n_groups = 0 if numel == 0 else (1 if spec.group_size is None else numel // spec.group_size)
    scale = np.asarray(spec.scale if spec.scale is not None else [], dtype=np.float32).ravel()
    zero = np.asarray(spec.zero if spec.zero is not None else [], dtype=np.float32).ravel()
    if scale.size != n_groups or zero.size != n_groups:
        raise ValueError(f"group table has {scale.size} scales / {zero.size} zeros, "
                         f"expected {n_groups}")
    return PackedWeights(spec.bits, spec.group_size, tuple(codes.shape), scale, zero,
                         pack_codes(codes, spec.bits))


def unpack(pw: PackedWeights) -> tuple[np.ndarray, QuantSpec]:
    codes = unpack_codes(pw.payload, pw.bits, pw.numel).reshape(pw.shape)
    spec = QuantSpec(pw.bits, pw.group_size, "rtn", scale=pw.scale.copy(), zero=pw.zero.copy())
    return codes, spec


# -- container --------------------------------------------------------------

def _header(name: str, bits: int, group_size: int | None, shape) -> bytes:
    raw = name.encode("utf-8")
    out = struct.pack("<I", len(raw)) + raw
    out += struct.pack("<BI", bits, group_size or 0)
    out += struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return out


def _encode_record(name: str, value) -> bytes:
    if isinstance(value, PackedWeights):
        body = _header(name, value.bits, value.group_size, value.shape)
        table = np.empty((value.n_groups, 2), dtype="<f4")
        table[:, 0], table[:, 1] = value.scale, value.zero
        body += table.tobytes() + value.payload
    elif isinstance(value, dict):
        raw = json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = _header(name, META_BITS, None, (len(raw),)) + raw
    else:
        arr = np.ascontiguousarray(value, dtype="<f4")
        body = _header(name, DENSE_BITS, None, arr.shape) + arr.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def encode_container(records: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts += [_encode_record(name, value) for name, value in records.items()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptFileError(f"truncated container at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_container(buf: bytes) -> dict:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CorruptFileError("bad magic; not a ULBQ container")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CorruptFileError(f"unsupported container version {version}")
    records = {}
    while r.pos < len(buf):
        start = r.pos
        name = r.take(r.u32()).decode("utf-8")
        bits = r.take(1)[0]
        group_size = r.u32() or None
        rank = r.u32()
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        numel = int(np.prod(shape)) if shape else 1
        if bits == META_BITS:
            value = json.loads(r.take(shape[0]).decode("utf-8"))
        elif bits == DENSE_BITS:
            value = np.frombuffer(r.take(4 * numel), dtype="<f4").reshape(shape).copy()
        elif 1 <= bits <= 8:
            if group_size is not None and numel % group_size:
                raise CorruptFileError(f"{name}: group size {group_size} does not divide {numel}")
            n_groups = 0 if numel == 0 else (1 if group_size is None else numel // group_size)
            table = np.frombuffer(r.take(8 * n_groups), dtype="<f4").reshape(n_groups, 2)
            payload = r.take((numel * bits + 7) // 8)
            value = PackedWeights(bits, group_size, shape, table[:, 0].copy(), table[:, 1].copy(), payload)
        else:
            raise CorruptFileError(f"{name}: unknown record kind bits={bits}")
        crc = zlib.crc32(buf[start:r.pos])
        if r.u32() != crc:
            raise CorruptFileError(f"{name}: CRC mismatch")
        records[name] = value
    return records


def write_container(path, records: dict) -> bytes:
    data = encode_container(records)
    Path(path).write_bytes(data)
    return data


def read_container(path) -> dict:
    return decode_container(Path(path).read_bytes())
