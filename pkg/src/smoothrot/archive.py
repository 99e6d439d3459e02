"""Tensor-archive file format.

Layout: magic bytes ``TARC1\\n``, an 8-byte little-endian unsigned header
length, a UTF-8 JSON header mapping tensor name to
``{dtype, shape, offset, byte_length}`` (offsets relative to the payload
start, optional ``meta`` object per entry), then the raw little-endian
payload. Round trips are bit-exact for all finite float32 values,
subnormals included.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = [
    "ArchiveError",
    "MalformedHeaderError",
    "TruncatedPayloadError",
    "LengthMismatchError",
    "save_archive",
    "load_archive",
]

MAGIC = b"TARC1\n"

_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.int32): "i32"}


class ArchiveError(ValueError):
    """Base class for tensor-archive parse/serialize failures."""


class MalformedHeaderError(ArchiveError):
    """Bad magic, unreadable header, or an invalid header structure."""


class TruncatedPayloadError(ArchiveError):
    """Declared payload extends past the end of the file."""


class LengthMismatchError(ArchiveError):
    """Entry byte length does not match its declared shape."""


def save_archive(tensors, path, meta=None) -> None:
    """Write a name→tensor map (float32 or int32 arrays) to ``path``.

    Args:
        tensors: Mapping of nonempty unique names to arrays.
        path: Destination file path.
        meta: Optional mapping name → JSON-serializable dict stored in the
            header next to that entry.

    Entries are written in sorted-name order with a canonical JSON header,
    so identical inputs produce byte-identical files.
    """
    meta = meta or {}
    header: dict[str, dict] = {}
    payloads: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        if not isinstance(name, str) or not name:
            raise ArchiveError("tensor names must be nonempty strings")
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_NAMES:
            raise ArchiveError(
                f"unsupported dtype {arr.dtype} for entry {name!r} (use float32 or int32)"
            )
        dtype_name = _DTYPE_NAMES[arr.dtype]
        raw = arr.astype(_DTYPES[dtype_name], copy=False).tobytes()
        entry = {
            "dtype": dtype_name,
            "shape": list(arr.shape),
            "offset": offset,
            "byte_length": len(raw),
        }
        if name in meta:
            entry["meta"] = meta[name]
        header[name] = entry
        payloads.append(raw)
        offset += len(raw)

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for raw in payloads:
            fh.write(raw)


def load_archive(path, with_meta: bool = False):
    """Read an archive back into a name→array map.

    Args:
        path: Source file path.
        with_meta: When true, also return the name→meta mapping.

    Raises:
        MalformedHeaderError: Bad magic or unparseable/invalid header.
        TruncatedPayloadError: Declared payload exceeds the file size.
        LengthMismatchError: byte_length inconsistent with shape.
    """
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError(f"{path}: missing TARC1 magic bytes")
    header_len = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 8], "little")
    header_start = len(MAGIC) + 8
    payload_start = header_start + header_len
    if payload_start > len(blob):
        raise MalformedHeaderError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[header_start:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header must be a JSON object")

    payload = blob[payload_start:]
    tensors: dict[str, np.ndarray] = {}
    metas: dict[str, dict] = {}
    for name, entry in header.items():
        if not isinstance(entry, dict) or not {
            "dtype",
            "shape",
            "offset",
            "byte_length",
        } <= set(entry):
            raise MalformedHeaderError(f"{path}: entry {name!r} missing required fields")
        dtype_name = entry["dtype"]
        if dtype_name not in _DTYPES:
            raise MalformedHeaderError(f"{path}: entry {name!r} has unknown dtype {dtype_name!r}")
        shape = tuple(int(d) for d in entry["shape"])
        offset = int(entry["offset"])
        byte_length = int(entry["byte_length"])
        dtype = _DTYPES[dtype_name]
        if byte_length != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise LengthMismatchError(
                f"{path}: entry {name!r} declares shape {shape} but {byte_length} bytes"
            )
        if offset < 0 or offset + byte_length > len(payload):
            raise TruncatedPayloadError(
                f"{path}: truncated payload for entry {name!r} "
                f"(needs bytes [{offset}, {offset + byte_length}), have {len(payload)})"
            )
        arr = np.frombuffer(payload, dtype=dtype, count=byte_length // dtype.itemsize, offset=offset)
        arr = arr.reshape(shape).copy()
        if dtype_name == "f32" and not np.all(np.isfinite(arr)):
            raise ArchiveError(f"{path}: entry {name!r} contains non-finite values")
        tensors[name] = arr
        if "meta" in entry:
            metas[name] = entry["meta"]

    if with_meta:
        return tensors, metas
    return tensors
