"""Flat little-endian tensor files: an 8-byte header length, a JSON header, then raw blobs."""

import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from app.core.exceptions import ArtifactNotFoundError, ChecksumError
from app.utils.seeding import bytes_digest


def encode_tensors(tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> bytes:
    entries, blobs, offset = {}, [], 0
    for name in sorted(tensors):
        array = np.asarray(tensors[name])
        dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder not in ("|", "<") else array.dtype
        blob = np.ascontiguousarray(array, dtype=dtype).tobytes()
        entries[name] = {"dtype": dtype.str, "shape": list(array.shape), "offset": offset, "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return len(header).to_bytes(8, "little") + header + b"".join(blobs)


def decode_tensors(raw: bytes, source: str = "<bytes>") -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if len(raw) < 8:
        raise ChecksumError(f"{source}: truncated tensor file")
    size = int.from_bytes(raw[:8], "little")
    try:
        header = json.loads(raw[8 : 8 + size])
    except ValueError as exc:
        raise ChecksumError(f"{source}: unreadable tensor header") from exc
    body = raw[8 + size :]
    tensors = {}
    for name, entry in header["tensors"].items():
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise ChecksumError(f"{source}: tensor {name!r} runs past the end of the file")
        array = np.frombuffer(body[entry["offset"] : end], dtype=np.dtype(entry["dtype"]))
        tensors[name] = array.reshape(entry["shape"]).copy()
    return tensors, header.get("meta", {})


def write_tensors(path: Path, tensors: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> str:
    """Write the file and return its sha256."""
    raw = encode_tensors(tensors, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return bytes_digest(raw)


def read_tensors(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if not path.is_file():
        raise ArtifactNotFoundError(path, "tensor file")
    return decode_tensors(path.read_bytes(), str(path))
