"""Container format shared by dataset (``LQRF``) and checkpoint (``LQRC``) files.

Layout::

    <MAGIC> <version>\\n
    <header byte count>\\n
    <header: UTF-8 JSON, sorted keys, indented>
    <payload: float32 little-endian sections, in manifest order>

The header's ``sections`` list gives each section's name, shape, byte offset
into the payload, byte count and CRC-32, so a reader can verify every
section independently and name the one that is damaged.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def encode_header(header: dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, indent=1, default=_json_default, allow_nan=True).encode("utf-8")


def write_container(path, magic: str, header: dict[str, Any], sections: Iterable[tuple[str, np.ndarray]]) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in sections:
        data = np.ascontiguousarray(np.asarray(arr, dtype=np.float64).astype(_DTYPE))
        raw = data.tobytes()
        manifest.append(
            {"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    full = dict(header)
    full["sections"] = manifest
    head = encode_header(full)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{magic} {FORMAT_VERSION}\n{len(head)}\n".encode("ascii"))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def read_container(path, magic: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Return ``(header, sections)``; section arrays are float32 as stored."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    try:
        nl1 = blob.index(b"\n")
        nl2 = blob.index(b"\n", nl1 + 1)
        tag, version = blob[:nl1].decode("ascii").split()
        head_len = int(blob[nl1 + 1:nl2])
    except (ValueError, UnicodeDecodeError):
        raise FormatError(f"{path}: not a {magic} file (bad preamble)") from None
    if tag != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {tag!r}")
    if int(version) != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    start = nl2 + 1
    try:
        header = json.loads(blob[start:start + head_len].decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise FormatError(f"{path}: header is not valid JSON") from None
    payload = memoryview(blob)[start + head_len:]
    sections: dict[str, np.ndarray] = {}
    for sec in header.get("sections", []):
        name = sec["name"]
        lo, n = int(sec["offset"]), int(sec["nbytes"])
        shape = tuple(int(s) for s in sec["shape"])
        raw = bytes(payload[lo:lo + n])
        expected = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if len(raw) != n or n != expected:
            raise FormatError(f"{path}: section {name!r} is truncated or has the wrong size")
        if zlib.crc32(raw) != int(sec["crc32"]):
            raise FormatError(f"{path}: section {name!r} failed its integrity check")
        sections[name] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape)
    return header, sections
