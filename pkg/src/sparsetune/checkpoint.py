"""Binary checkpoint container with a tensor directory and config snapshot.

Layout: magic, version, header length, JSON header (endianness, tensor
directory with name/dtype/shape/offset/nbytes, config snapshot, metadata),
then raw little-endian tensor payloads.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"STCHKPT\x01"
VERSION = 1


def save_container(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    config: dict | None = None,
    meta: dict | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        payload = arr.tobytes()
        directory.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(payload),
        })
        payloads.append(payload)
        offset += len(payload)
    header = json.dumps({
        "endianness": "little",
        "tensors": directory,
        "config": config or {},
        "meta": meta or {},
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for payload in payloads:
            fh.write(payload)


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 12:
        raise LoadError(f"{path}: truncated header")
    if blob[:len(MAGIC)] != MAGIC:
        raise LoadError(f"{path}: bad magic, not a checkpoint container")
    version = int.from_bytes(blob[8:12], "little")
    if version != VERSION:
        raise LoadError(f"{path}: unsupported container version {version}")
    header_len = int.from_bytes(blob[12:20], "little")
    header_end = 20 + header_len
    if len(blob) < header_end:
        raise LoadError(f"{path}: truncated header block")
    try:
        header = json.loads(blob[20:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: corrupt header json: {exc}") from exc
    if header.get("endianness") != "little":
        raise LoadError(f"{path}: unsupported endianness {header.get('endianness')!r}")
    payload = blob[header_end:]
    tensors: dict[str, np.ndarray] = {}
    spans: list[tuple[int, int, str]] = []
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        end = start + nbytes
        if end > len(payload):
            raise LoadError(f"{path}: tensor {entry['name']!r} extends past end of file")
        spans.append((start, end, entry["name"]))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise LoadError(f"{path}: directory entries {n0!r} and {n1!r} overlap")
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + nbytes], dtype=np.dtype(entry["dtype"]))
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise LoadError(f"{path}: tensor {entry['name']!r} payload size mismatch")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header.get("config", {}), header.get("meta", {})
