"""Binary tensor formats.

PTNS (single tensor)::

    b"PTNS" | u16 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank
    | rank x u64 dims | row-major payload, all little-endian

PTAR (named collection)::

    b"PTAR" | u32 count | count x (u16 name_len | utf-8 name | PTNS blob)

Sidecar manifests are plain JSON written with sorted keys so that reruns
produce byte-identical files.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from probekit.errors import FormatError

PTNS_MAGIC = b"PTNS"
PTAR_MAGIC = b"PTAR"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; PTNS stores f32 or f64")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = PTNS_MAGIC + struct.pack("<HBB", VERSION, _CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one PTNS blob starting at ``offset``; returns (array, end offset)."""
    if buf[offset : offset + 4] != PTNS_MAGIC:
        raise FormatError("bad PTNS magic")
    try:
        version, code, rank = struct.unpack_from("<HBB", buf, offset + 4)
    except struct.error as exc:
        raise FormatError("truncated PTNS header") from exc
    if version != VERSION:
        raise FormatError(f"unsupported PTNS version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 8
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dt.itemsize
    if pos + nbytes > len(buf):
        raise FormatError("truncated PTNS payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims).copy()
    return arr, pos + nbytes


def encode_archive(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [PTAR_MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(arr))
    return b"".join(parts)


def decode_archive(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != PTAR_MAGIC:
        raise FormatError("bad PTAR magic")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        out[name], pos = decode_tensor(buf, pos)
    if pos != len(buf):
        raise FormatError("trailing bytes after PTAR entries")
    return out


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    arr, _ = decode_tensor(Path(path).read_bytes())
    return arr


def save_archive(path, entries: Mapping[str, np.ndarray], manifest: dict | None = None) -> None:
    """Write a PTAR file and, if given, ``<path>.json`` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_archive(entries))
    if manifest is not None:
        write_json(manifest_path(path), manifest)


def load_archive(path) -> "OrderedDict[str, np.ndarray]":
    return decode_archive(Path(path).read_bytes())


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_manifest(path) -> dict:
    return json.loads(manifest_path(path).read_text())


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
