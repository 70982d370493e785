"""Binary parameter container shared by backbone and adapter-bank checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"PHYADPT1"
    version      uint32    1
    header_len   uint64
    header       header_len bytes of UTF-8 JSON:
                 {"kind", "meta", "tensors": [{"name", "shape", "offset", "nbytes"}], "sha256"}
    payload      concatenated float64 ("<f8") tensors in header order

``sha256`` is the digest of the payload; it doubles as the checksum printed by
``phyloadapt inspect``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PHYADPT1"
VERSION = 1
_PRELUDE = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def tensor_checksum(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(a.shape).encode("ascii"))
        h.update(a.tobytes())
    return h.hexdigest()


def save(path: str | Path, kind: str, meta: dict, tensors: Mapping[str, np.ndarray]) -> str:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = json.dumps({"kind": kind, "meta": meta, "tensors": entries, "sha256": digest}, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_PRELUDE.pack(MAGIC, VERSION, len(header)) + header + payload)
    return digest


def load(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray], str]:
    """Return ``(kind, meta, tensors, sha256)``; raises :class:`CheckpointError` on any corruption."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic header (expected {MAGIC!r})")
    if len(blob) < _PRELUDE.size:
        raise CheckpointError(f"{path}: truncated prelude")
    _, version, hlen = _PRELUDE.unpack_from(blob)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    start = _PRELUDE.size
    if len(blob) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = blob[start + hlen :]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header["kind"], header["meta"], tensors, digest
