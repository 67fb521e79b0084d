"""Versioned checkpoint container.

Layout (all integers little-endian)::

    magic     8 bytes   b"NOISYNP\\x00"
    version   u32
    hdr_len   u64
    header    hdr_len bytes of canonical JSON (sorted keys)
    payload   raw little-endian tensor data, in header order
    digest    32 bytes, SHA-256 of everything above

The header carries the config echo, global step, RNG states, free-form
metadata and a tensor table of ``{name, shape, dtype, offset, nbytes}``.
Files are written to a temporary sibling and renamed, so readers never see a
partial file.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .errors import CheckpointFormatError

MAGIC = b"NOISYNP\x00"
VERSION = 1
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
}
_FROM_STR = {v: k for k, v in _DTYPES.items()}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, tensors: dict[str, torch.Tensor], *, step: int, config: dict,
                    rng_state: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    table = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointFormatError(f"unsupported dtype {t.dtype} for {name!r}")
        code = _DTYPES[t.dtype]
        data = t.numpy().astype(code, copy=False).tobytes(order="C")
        table.append({"name": name, "shape": list(t.shape), "dtype": code,
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = _canonical_json({
        "format_version": VERSION,
        "step": int(step),
        "config": config,
        "rng": rng_state or {},
        "meta": meta or {},
        "tensors": table,
    })
    body = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    blob = body + hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict[str, Any]:
    """Returns ``{"tensors", "step", "config", "rng", "meta"}``."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 12 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointFormatError(f"{path} is corrupted (digest mismatch)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (hdr_len,) = struct.unpack_from("<Q", body, pos + 4)
    start = pos + 12
    try:
        header = json.loads(body[start:start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path} has an unreadable header") from exc
    payload = body[start + hdr_len:]
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointFormatError(f"{path} is truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(_FROM_STR[entry["dtype"]])
    return {"tensors": tensors, "step": header["step"], "config": header["config"],
            "rng": header["rng"], "meta": header["meta"]}
