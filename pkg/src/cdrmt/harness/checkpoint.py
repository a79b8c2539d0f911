"""Binary checkpoint: magic, version, JSON manifest, little-endian float32 payload.

Layout::

    b"CDRMTCKP"                 8 bytes
    version                     u32 little-endian
    manifest length             u32 little-endian
    manifest                    UTF-8 JSON {"params": {name: {"shape", "offset"}}, "config": {...}}
    payload                     contiguous float32 little-endian, offsets relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointFormatError, CheckpointTruncatedError, CheckpointVersionError

MAGIC = b"CDRMTCKP"
VERSION = 1
_HEADER = struct.Struct("<8sII")


def dumps(named_params, config: dict | None = None) -> bytes:
    manifest = {"params": {}, "config": config or {}}
    chunks = []
    offset = 0
    for name, p in named_params:
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        manifest["params"][name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a checkpoint into ``({name: float64 array}, config)``; nothing partial is returned."""
    if len(data) < _HEADER.size:
        if not MAGIC.startswith(data[: len(MAGIC)]):
            raise CheckpointFormatError("not a checkpoint file (bad magic)")
        raise CheckpointTruncatedError("checkpoint header is truncated")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    if len(data) < start + length:
        raise CheckpointTruncatedError("checkpoint manifest is truncated")
    try:
        manifest = json.loads(data[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"checkpoint manifest is not valid JSON ({exc})") from exc
    payload = memoryview(data)[start + length :]
    arrays = {}
    for name, entry in manifest["params"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        begin, end = entry["offset"], entry["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointTruncatedError(f"payload for {name!r} is truncated")
        arrays[name] = np.frombuffer(payload[begin:end], dtype="<f4").astype(np.float64).reshape(shape)
    return arrays, manifest.get("config", {})


def save(model, path: str | Path, config: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model.named_parameters(), config))


def read(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def load_into(model, arrays: dict[str, np.ndarray]) -> None:
    """Assign every parameter of ``model`` from ``arrays``; all names are checked before any write."""
    named = dict(model.named_parameters())
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise CheckpointFormatError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in named.items():
        if tuple(arrays[name].shape) != p.shape:
            raise CheckpointFormatError(f"{name}: stored shape {arrays[name].shape} differs from {p.shape}")
    for name, p in named.items():
        p.assign(arrays[name])
