"""Versioned binary containers for checkpoints, Fisher maps and masks.

Layout (all integers little-endian)::

    magic   8 bytes   b"LNTUNE\\x00\\x01"
    hlen    u64       length of the JSON header
    header  hlen      UTF-8 JSON, keys sorted, no whitespace
    payload           tensors back to back in header order

The header carries ``kind``, ``version``, free-form ``meta`` and a list of
``[path, shape, encoding, nbytes]`` records.  ``f8`` payloads are
little-endian float64 in row-major order; ``bits`` payloads are bitsets with
element ``i`` at bit ``i % 8`` of byte ``i // 8``.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"LNTUNE\x00\x01"
VERSION = 1


class ContainerError(ValueError):
    pass


def _encode(arr: np.ndarray, encoding: str) -> bytes:
    if encoding == "f8":
        return np.ascontiguousarray(arr, dtype="<f8").tobytes()
    if encoding == "bits":
        return np.packbits(np.ascontiguousarray(arr, dtype=bool).reshape(-1), bitorder="little").tobytes()
    raise ContainerError(f"unknown encoding {encoding!r}")


def _decode(buf: bytes, shape, encoding: str) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    if encoding == "f8":
        return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    if encoding == "bits":
        bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n, bitorder="little")
        return bits.astype(bool).reshape(shape)
    raise ContainerError(f"unknown encoding {encoding!r}")


def dumps(kind: str, meta: Mapping, tensors: Mapping[str, np.ndarray], encoding: str = "f8") -> bytes:
    blobs = [(p, list(np.shape(a)), _encode(np.asarray(a), encoding)) for p, a in tensors.items()]
    header = {
        "kind": kind,
        "version": VERSION,
        "meta": meta,
        "tensors": [[p, shape, encoding, len(b)] for p, shape, b in blobs],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(head)), head] + [b for _, _, b in blobs])


def loads(data: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise ContainerError("not an lntune container (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ContainerError(f"unsupported container version {header.get('version')}")
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"expected a {kind!r} container, found {header.get('kind')!r}")
    pos = 16 + hlen
    tensors = {}
    for path, shape, encoding, nbytes in header["tensors"]:
        tensors[path] = _decode(data[pos:pos + nbytes], tuple(shape), encoding)
        pos += nbytes
    if pos != len(data):
        raise ContainerError("trailing bytes after payload")
    return header, tensors


def write(path: str | os.PathLike, kind: str, meta: Mapping, tensors: Mapping[str, np.ndarray],
          encoding: str = "f8") -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(kind, meta, tensors, encoding))


def read(path: str | os.PathLike, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return loads(fh.read(), kind)


def save_checkpoint(path, params: Mapping[str, np.ndarray], config) -> None:
    write(path, "checkpoint", {"config": config.to_dict()}, params)


def load_checkpoint(path):
    from .model import ModelConfig

    header, tensors = read(path, "checkpoint")
    return tensors, ModelConfig.from_dict(header["meta"]["config"])
