"""MTEN tensor files, PGM heatmaps and atomic JSON/CSV writers."""
from __future__ import annotations

import csv
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTEN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i4")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("int32"): 2}


class FormatError(ValueError):
    pass


def encode_mten(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = arr.astype(np.float32)
    elif arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype(np.int32)
    code = _CODES[arr.dtype]
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    head = MAGIC + bytes([VERSION, code, arr.ndim])
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_mten(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError("bad MTEN magic")
    version, code, ndim = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise FormatError(f"unsupported MTEN version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 7 + 4 * ndim
    shape = struct.unpack(f"<{ndim}I", buf[7:off])
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) - off != count * dt.itemsize:
        raise FormatError("payload length does not match extents")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_mten(path, array):
    _atomic_write(path, encode_mten(array))


def load_mten(path) -> np.ndarray:
    return decode_mten(Path(path).read_bytes())


def save_pgm(path, values):
    """Write a 2-d map as binary P5, min-max normalised to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise FormatError("PGM export needs a 2-d map")
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    head = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii")
    _atomic_write(path, head + pix.tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1 : pos + 1 + w * h]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def save_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def load_json(path):
    return json.loads(Path(path).read_text())


def save_csv(path, rows, fieldnames=None):
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})
    _atomic_write(path, buf.getvalue().encode())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v
