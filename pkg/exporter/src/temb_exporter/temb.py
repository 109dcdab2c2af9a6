"""TEMB v1 container, written and verified byte-for-byte.

Layout (all little-endian):

    offset 0   4 bytes  ASCII magic "TEMB"
    offset 4   u32      version (= 1)
    offset 8   u32      record count N
    offset 12  u32      token count K
    offset 16  u32      embedding width e
    offset 20  N records, each: u64 caption_id + K*e IEEE-754 f32, row-major
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TEMB"
VERSION = 1
HEADER = struct.Struct("<4sIIII")


class TembError(ValueError):
    """Format violation; message carries the byte offset."""


def write_temb(path, records: list[tuple[int, np.ndarray]]) -> None:
    """``records`` holds (caption_id, [K, e] float array) in output order."""
    if not records:
        raise TembError("refusing to write an empty TEMB file")
    k, e = records[0][1].shape
    parts = [HEADER.pack(MAGIC, VERSION, len(records), k, e)]
    for cid, rows in records:
        if rows.shape != (k, e):
            raise TembError(f"record {cid}: shape {rows.shape} differs from ({k}, {e})")
        parts.append(struct.pack("<Q", cid))
        parts.append(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_temb(path) -> tuple[int, int, list[tuple[int, np.ndarray]]]:
    """Returns (K, e, records); raises TembError with byte offsets."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        got = blob[:4] if blob else b""
        raise TembError(f"bad magic {got!r} at offset 0 (expected {MAGIC!r})")
    if len(blob) < HEADER.size:
        raise TembError(f"truncated header at offset {len(blob)} (need {HEADER.size} bytes)")
    _, version, n, k, e = HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise TembError(f"unsupported version {version} at offset 4")
    if k < 1 or e < 1:
        raise TembError(f"invalid dimensions K={k} (offset 12), e={e} (offset 16)")
    record_bytes = 8 + 4 * k * e
    expected = HEADER.size + n * record_bytes
    if len(blob) != expected:
        verb = "truncated" if len(blob) < expected else "trailing bytes"
        off = min(len(blob), expected)
        raise TembError(f"{verb} at offset {off}: file is {len(blob)} bytes, "
                        f"header declares {expected}")
    records = []
    seen = set()
    for i in range(n):
        off = HEADER.size + i * record_bytes
        (cid,) = struct.unpack_from("<Q", blob, off)
        if cid in seen:
            raise TembError(f"duplicate caption id {cid} at offset {off}")
        seen.add(cid)
        rows = np.frombuffer(blob, dtype="<f4", count=k * e, offset=off + 8)
        records.append((cid, rows.reshape(k, e).astype(np.float64)))
    return k, e, records
