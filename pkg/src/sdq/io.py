"""Checkpoint and metrics-log formats (byte layouts in docs/formats.md)."""
from __future__ import annotations

import json
import struct

import numpy as np

from .gradcore import ContractError

MAGIC = b"SDQCKPT\x00"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<IQ")


def encode_checkpoint(arrays, meta: dict | None = None) -> bytes:
    """Serialize ``(name, array)`` pairs in the given order.

    Header: JSON with sorted keys, ``{"meta": ..., "tensors": [{"name",
    "shape"}, ...]}``.  Payload: each array as row-major little-endian
    float64, back to back.
    """
    tensors = []
    payload = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": tensors}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + _PREFIX.pack(CKPT_VERSION, len(header)) + header + b"".join(payload)


def decode_checkpoint(blob: bytes):
    if blob[:len(MAGIC)] != MAGIC:
        raise ContractError("not an sdq checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + _PREFIX.size:
        raise ContractError("truncated checkpoint header")
    version, hlen = _PREFIX.unpack_from(blob, pos)
    if version != CKPT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos += _PREFIX.size
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = []
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * n
        if end > len(blob):
            raise ContractError(f"truncated checkpoint payload at tensor {t['name']!r}")
        arrays.append((t["name"], np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).copy()))
        pos = end
    if pos != len(blob):
        raise ContractError("trailing bytes after checkpoint payload")
    return arrays, header["meta"]


def save_checkpoint(path, model, meta: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model.state(), meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"


class MetricsLog:
    """Append-only JSON-lines writer; one record per epoch."""

    def __init__(self, path):
        self.path = path
        with open(path, "w", encoding="utf-8", newline="\n"):
            pass

    def __call__(self, record: dict):
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(metrics_line(record))


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
