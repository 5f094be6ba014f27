"""Binary checkpoint container.

Layout::

    8 bytes   magic  b"FORGECKP"
    4 bytes   format version (u32 LE)
    8 bytes   header length in bytes (u64 LE)
    N bytes   UTF-8 JSON header
    payload   raw little-endian float32 arrays, back to back

The header records, per array, its shape, dtype, byte offset into the payload
and a sha256 of its bytes, plus a free-form ``meta`` object.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FORGECKP"
VERSION = 1


class ArtifactError(RuntimeError):
    """Missing or corrupt artifact on disk."""


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = {}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries[name] = {
            "shape": list(np.shape(arr)),
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise ArtifactError(f"{source}: not a forge checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise ArtifactError(f"{source}: unsupported container version {version}")
    try:
        header = json.loads(blob[20 : 20 + hlen])
    except ValueError as e:
        raise ArtifactError(f"{source}: corrupt header ({e})") from None
    base = 20 + hlen
    arrays = {}
    for name, e in header["arrays"].items():
        raw = blob[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ArtifactError(f"{source}: array {name!r} truncated")
        digest = hashlib.sha256(raw).hexdigest()
        if digest != e["sha256"]:
            raise ArtifactError(f"{source}: array {name!r} checksum mismatch (expected {e['sha256']}, got {digest})")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a container atomically; returns the sha256 of the file bytes."""
    blob = encode(arrays, meta)
    atomic_write_bytes(path, blob)
    return hashlib.sha256(blob).hexdigest()


def load(path, expected_sha256: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        hint = f" (expected sha256 {expected_sha256})" if expected_sha256 else ""
        raise ArtifactError(f"missing artifact: {path}{hint}")
    blob = path.read_bytes()
    if expected_sha256 is not None:
        got = hashlib.sha256(blob).hexdigest()
        if got != expected_sha256:
            raise ArtifactError(f"{path}: file hash {got} does not match expected {expected_sha256}")
    return decode(blob, str(path))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
