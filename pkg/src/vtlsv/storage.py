"""Little-endian binary containers for features and models.

VSVF  features:  magic, u16 version, u32 dim, u32 frames, i16 alpha*100,
                 u16 id length, UTF-8 id, float32 payload (dim x frames, row-major)
VSVG  GMM:       magic, u16 version, u32 K, u32 D, float64 weights, means, variances
VSVT/VSVP/VSVN   named-array container: magic, u16 version, u32 header length,
                 UTF-8 JSON header (metadata + array table), float64 payloads
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

VERSION = 1


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read(path, magic: bytes) -> memoryview:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise DataError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    return memoryview(data)


def _encode_features(values: np.ndarray, utterance_id: str, alpha: float) -> bytes:
    values = np.asarray(values, dtype="<f4")
    uid = utterance_id.encode("utf-8")
    head = b"VSVF" + struct.pack("<HIIhH", VERSION, values.shape[0], values.shape[1],
                                 int(round(alpha * 100)), len(uid)) + uid
    return head + np.ascontiguousarray(values).tobytes()


def _decode_features(buf: memoryview, path):
    _, dim, frames, acode, idlen = struct.unpack_from("<HIIhH", buf, 4)
    off = 4 + struct.calcsize("<HIIhH")
    uid = bytes(buf[off:off + idlen]).decode("utf-8")
    off += idlen
    n = dim * frames
    if len(buf) - off != 4 * n:
        raise DataError(f"{path}: payload size mismatch")
    values = np.frombuffer(buf[off:], dtype="<f4", count=n).reshape(dim, frames)
    return values.astype(np.float64), uid, acode / 100.0


def save_features(path, values: np.ndarray, utterance_id: str, alpha: float) -> None:
    _atomic_write(path, _encode_features(values, utterance_id, alpha))


def load_features(path):
    """Returns (values float64 D x T, utterance_id, alpha)."""
    return _decode_features(_read(path, b"VSVF"), path)


def save_feature_archive(path, records) -> None:
    """Many VSVF records in one file: `VSVA`, version, count, then
    length-prefixed records. `records` yields (values, utterance_id, alpha)."""
    blobs = [_encode_features(v, u, a) for v, u, a in records]
    parts = [b"VSVA", struct.pack("<HI", VERSION, len(blobs))]
    for blob in blobs:
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    _atomic_write(path, b"".join(parts))


def load_feature_archive(path) -> list:
    buf = _read(path, b"VSVA")
    _, count = struct.unpack_from("<HI", buf, 4)
    off = 4 + struct.calcsize("<HI")
    out = []
    for _ in range(count):
        if off + 8 > len(buf):
            raise DataError(f"{path}: truncated archive")
        (size,) = struct.unpack_from("<Q", buf, off)
        off += 8
        rec = buf[off:off + size]
        if len(rec) != size or bytes(rec[:4]) != b"VSVF":
            raise DataError(f"{path}: corrupt record")
        out.append(_decode_features(rec, path))
        off += size
    if off != len(buf):
        raise DataError(f"{path}: trailing bytes")
    return out


def save_gmm(path, weights, means, variances) -> None:
    k, d = np.shape(means)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                       for a in (weights, means, variances))
    _atomic_write(path, b"VSVG" + struct.pack("<HII", VERSION, k, d) + payload)


def load_gmm(path):
    buf = _read(path, b"VSVG")
    _, k, d = struct.unpack_from("<HII", buf, 4)
    off = 4 + struct.calcsize("<HII")
    flat = np.frombuffer(buf[off:], dtype="<f8")
    if flat.size != k + 2 * k * d:
        raise DataError(f"{path}: payload size mismatch")
    return flat[:k].copy(), flat[k:k + k * d].reshape(k, d).copy(), flat[k + k * d:].reshape(k, d).copy()


def save_arrays(path, magic: bytes, arrays: dict, meta: dict | None = None) -> None:
    table = []
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "arrays": table}, sort_keys=True).encode("utf-8")
    _atomic_write(path, magic + struct.pack("<HI", VERSION, len(header)) + header + b"".join(payload))


def load_arrays(path, magic: bytes):
    """Returns (dict of arrays, metadata dict)."""
    buf = _read(path, magic)
    _, hlen = struct.unpack_from("<HI", buf, 4)
    off = 4 + struct.calcsize("<HI")
    header = json.loads(bytes(buf[off:off + hlen]).decode("utf-8"))
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(buf):
            raise DataError(f"{path}: truncated payload")
        arrays[entry["name"]] = np.frombuffer(buf[off:off + 8 * n], dtype="<f8").reshape(shape).copy()
        off += 8 * n
    if off != len(buf):
        raise DataError(f"{path}: trailing bytes")
    return arrays, header["meta"]
