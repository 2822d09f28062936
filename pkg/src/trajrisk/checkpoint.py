"""Named-array checkpoint archive.

Layout: ``FLNT1\\n``, the header byte length as ASCII digits and ``\\n``, a JSON
header, then the little-endian float64 payload. The header lists every array
as ``{name, shape, offset}`` (offset in bytes into the payload) and carries the
model config, dependency DAG and any extra metadata.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

__all__ = ["MAGIC", "CheckpointError", "dumps_checkpoint", "loads_checkpoint",
           "save_checkpoint", "load_checkpoint"]

MAGIC = b"FLNT1"


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(arrays: Dict[str, np.ndarray], meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arrays": entries, "payload_bytes": offset, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + b"\n" + str(len(header)).encode("ascii") + b"\n" + header + b"".join(chunks)


def loads_checkpoint(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC + b"\n"):
        raise CheckpointError("bad checkpoint header")
    rest = blob[len(MAGIC) + 1:]
    line, sep, rest = rest.partition(b"\n")
    if not sep or not line.isdigit():
        raise CheckpointError("bad checkpoint header")
    n = int(line)
    try:
        header = json.loads(rest[:n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("bad checkpoint header") from exc
    payload = rest[n:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"checkpoint payload truncated: expected {header.get('payload_bytes')} "
                              f"bytes, found {len(payload)}")
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(dumps_checkpoint(arrays, meta))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint to {path}: {exc.strerror}") from exc
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return loads_checkpoint(blob)
