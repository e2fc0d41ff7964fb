"""Binary array container ("SCPR") and 16-bit PGM previews.

Container layout, all little-endian::

    b"SCPR" | version u32 | entry count u32 |
    per entry: name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32[ndim] | raw data

dtype codes: 0 = float64, 1 = complex128 (interleaved float64 pairs), 2 = uint8.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCPR"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16"), 2: np.dtype("u1")}
_CODES = {"f": 0, "c": 1, "u": 2, "b": 2}


class ContainerError(ValueError):
    pass


def _encode(name, arr):
    arr = np.asarray(arr)
    if arr.dtype.kind == "c":
        code, arr = 1, arr.astype("<c16")
    elif arr.dtype.kind in "fi":
        code, arr = 0, arr.astype("<f8")
    elif arr.dtype == np.uint8 or arr.dtype.kind == "b":
        code, arr = 2, arr.astype("u1")
    else:
        raise ContainerError(f"entry {name!r}: unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ContainerError(f"entry {name!r}: too many dimensions")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def to_bytes(entries: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        parts.append(_encode(name, arr))
    return b"".join(parts)


def from_bytes(buf: bytes) -> dict:
    view = memoryview(buf)
    if len(buf) < 12 or bytes(view[:4]) != MAGIC:
        raise ContainerError("not an SCPR container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {VERSION})")
    pos = 12
    out = {}

    def need(nbytes, what):
        if pos + nbytes > len(buf):
            raise ContainerError(f"truncated container while reading {what}")

    for i in range(count):
        need(2, f"entry {i} header")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 2, f"entry {i} name")
        name = bytes(view[pos: pos + nlen]).decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _DTYPES:
            raise ContainerError(f"entry {name!r}: unknown dtype code {code}")
        need(4 * ndim, f"entry {name!r} dims")
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"entry {name!r} data")
        if name in out:
            raise ContainerError(f"duplicate entry name {name!r}")
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def write_container(path, entries: dict):
    data = to_bytes(entries)
    Path(path).write_bytes(data)
    return path


def read_container(path) -> dict:
    return from_bytes(Path(path).read_bytes())


def json_entry(obj) -> np.ndarray:
    """Canonical JSON text stored as a uint8 entry."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def read_json_entry(arr) -> object:
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def export_pgm(grid, path, vmin, vmax):
    """Write a 16-bit binary PGM, mapping [vmin, vmax] linearly to [0, 65535]."""
    if not vmin < vmax:
        raise ValueError(f"vmin ({vmin}) must be below vmax ({vmax})")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise ValueError("PGM export needs a 2D grid")
    q = quantize(grid, vmin, vmax)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.astype(">u2").tobytes())
    return path


def quantize(grid, vmin, vmax):
    scaled = (np.asarray(grid, dtype=float) - vmin) / (vmax - vmin)
    return np.rint(np.clip(scaled, 0.0, 1.0) * 65535).astype(np.uint16)


def _pgm_tokens(data, count, pos):
    tokens = []
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path):
    """Read a P5 (8/16-bit) or P2 PGM. Returns (pixels as uint array, maxval)."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4, 0)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P5":
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos + 1: pos + 1 + w * h * dt.itemsize]
        if len(raw) != w * h * dt.itemsize:
            raise ValueError(f"{path}: truncated PGM data")
        px = np.frombuffer(raw, dtype=dt).reshape(h, w)
    elif magic == b"P2":
        px = np.array(data[pos:].split()[: w * h], dtype=np.int64).reshape(h, w)
    else:
        raise ValueError(f"{path}: not a PGM file")
    return px.astype(np.int64), maxval


def export_csv(grid, path):
    np.savetxt(path, np.asarray(grid, dtype=float), delimiter=",", fmt="%.10g")
    return path
