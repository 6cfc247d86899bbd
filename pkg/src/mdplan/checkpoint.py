"""Single-blob model checkpoints: JSON header plus raw little-endian tensors.

Layout: 8-byte little-endian header length, the UTF-8 JSON header, then the
tensor bytes.  The header carries the model kind, its config, optional extras
(normalizer stats, gap sets, offsets), and a manifest of (name, shape, dtype,
byte offset) entries; offsets are relative to the start of the tensor section.
Writes are byte-deterministic for identical contents.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

_LEN_FMT = "<Q"


@dataclass
class CheckpointData:
    kind: str
    config: dict
    extra: dict
    params: dict


def save_checkpoint(path: str | Path, kind: str, config: dict, params: dict,
                    extra: dict | None = None) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": dtype.str, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "config": config, "extra": extra or {}, "manifest": manifest},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack(_LEN_FMT, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path) -> CheckpointData:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValidationError(f"{path}: not a checkpoint (too short)")
    (header_len,) = struct.unpack(_LEN_FMT, data[:8])
    if 8 + header_len > len(data):
        raise ValidationError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"{path}: bad checkpoint header: {e}")
    body = data[8 + header_len:]
    params = {}
    for entry in header["manifest"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        n = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + n > len(body):
            raise ValidationError(f"{path}: truncated tensor data for {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(body[start:start + n], dtype=dtype).reshape(shape).copy()
    return CheckpointData(kind=header["kind"], config=header["config"],
                          extra=header.get("extra", {}), params=params)
