"""Flat named-array checkpoint container.

Layout of an archive file:

    bytes 0..7    magic ``b"DSARCH01"``
    bytes 8..15   little-endian uint64: byte length of the JSON header
    header        UTF-8 JSON ``{"version": 1, "meta": {...}, "arrays": {...}}``
    payload       raw little-endian array bytes, concatenated

``arrays`` maps each key to ``{"dtype": <numpy dtype str>, "shape": [...],
"offset": <byte offset into the payload>}``.  Keys follow the
``<component>.<layer>.<tensor>`` convention used by the model state dicts
(e.g. ``spm.vca.0.attn.wq.weight``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"DSARCH01"
FORMAT_VERSION = 1


def _le_dtype(arr: np.ndarray) -> np.ndarray:
    """Return the array in little-endian byte order (no-op on LE hosts).

    Preserves 0-d shapes (``ascontiguousarray`` would promote them to 1-d).
    """
    out = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if not out.flags["C_CONTIGUOUS"]:
        out = out.copy(order="C")
    return out


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a named-array archive. Keys are stored in sorted order."""
    entries = {}
    payloads = []
    offset = 0
    for key in sorted(arrays):
        arr = _le_dtype(np.asarray(arrays[key]))
        entries[key] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
        }
        buf = arr.tobytes()
        payloads.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for buf in payloads:
            f.write(buf)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a named-array archive, returning ``(arrays, meta)``.

    Raises :class:`CheckpointError` on bad magic, version mismatch, or a
    truncated payload.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint archive not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"not a named-array archive: {path}")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    header_end = len(MAGIC) + 8 + header_len
    if header_end > len(raw):
        raise CheckpointError(f"truncated archive header: {path}")
    try:
        header = json.loads(raw[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt archive header: {path}: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"archive format version {header.get('version')!r} != {FORMAT_VERSION}: {path}"
        )
    payload = raw[header_end:]
    arrays: dict[str, np.ndarray] = {}
    for key, entry in header["arrays"].items():
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        start = entry["offset"]
        end = start + nbytes
        if end > len(payload):
            raise CheckpointError(f"truncated archive payload at key {key!r}: {path}")
        arrays[key] = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape).copy()
    return arrays, header.get("meta", {})
