"""Binary tensor container used for checkpoints and datasets.

Layout: magic b"SSNF", u32 version, u64 header length, JSON header, then
raw little-endian float32 blobs. The header maps tensor name ->
{"shape": [...], "offset": N} with offsets measured from the start of the
data section (the byte right after the header). A reserved "__meta__" key
carries non-tensor JSON (model dims, optimizer step, rng state) and has no
blob. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Optional

import numpy as np

from .errors import FormatError

MAGIC = b"SSNF"
VERSION = 1
META_KEY = "__meta__"


def save_tensors(path: str, tensors: dict[str, np.ndarray],
                 meta: Optional[dict] = None) -> None:
    """Write tensors (converted to little-endian f32) atomically to `path`."""
    header: dict = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        # asarray with order="C" rather than ascontiguousarray: the latter
        # promotes 0-d arrays to shape (1,), breaking scalar round trips.
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        header[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    if meta is not None:
        header[META_KEY] = meta
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp_fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".",
                                        prefix=".ckpt-")
    try:
        with os.fdopen(tmp_fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(hjson)))
            f.write(hjson)
            for b in blobs:
                f.write(b)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_tensors(path: str) -> tuple[dict[str, np.ndarray], Optional[dict]]:
    """Read a container; returns (tensors, meta-or-None)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated container, {len(raw)} bytes at offset 0")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} overruns file at offset 8")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad JSON header at offset 16: {e}") from e
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object at offset 16")
    data_start = 16 + hlen
    meta = header.pop(META_KEY, None)
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
        except (TypeError, KeyError, ValueError) as e:
            raise FormatError(f"{path}: malformed entry for {name!r}: {e}") from e
        count = int(np.prod(shape)) if shape else 1
        start = data_start + offset
        end = start + 4 * count
        if offset < 0 or end > len(raw):
            raise FormatError(f"{path}: blob for {name!r} overruns file at offset {start}")
        arr = np.frombuffer(raw[start:end], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32).copy()
    return tensors, meta
