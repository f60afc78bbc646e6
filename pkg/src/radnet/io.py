"""RVOL1 volume files and the CSV conventions shared by all subcommands."""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError
from .preprocess import Volume

RVOL_MAGIC = b"RVOL1\n"
VOXEL_DTYPES = {"i16le": np.dtype("<i2"), "f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def dump_header(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _dtype_tag(v: Volume) -> str:
    arr = v.voxels
    if v.kind == "mask" or arr.dtype == np.uint8:
        return "u8"
    if arr.dtype == np.int16:
        return "i16le"
    return "f32le"


def encode_volume(v: Volume) -> bytes:
    tag = _dtype_tag(v)
    header = dump_header({
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "dtype": tag,
        "kind": v.kind,
    })
    payload = np.ascontiguousarray(v.voxels, dtype=VOXEL_DTYPES[tag]).tobytes()
    return RVOL_MAGIC + struct.pack("<Q", len(header)) + header + payload


def decode_volume(buf: bytes, path: str | None = None) -> Volume:
    n_magic = len(RVOL_MAGIC)
    if buf[:n_magic] != RVOL_MAGIC:
        raise FormatError("bad RVOL1 magic", offset=0, path=path)
    if len(buf) < n_magic + 8:
        raise FormatError("truncated RVOL1 header length", offset=n_magic, path=path)
    (hlen,) = struct.unpack_from("<Q", buf, n_magic)
    start = n_magic + 8
    if len(buf) < start + hlen:
        raise FormatError("truncated RVOL1 header", offset=start, path=path)
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
        spacing = [float(s) for s in header["spacing_mm"]]
        dtype = VOXEL_DTYPES[header["dtype"]]
        kind = header["kind"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"invalid RVOL1 header: {exc}", offset=start, path=path) from None
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise FormatError(f"invalid RVOL1 dims {dims}", offset=start, path=path)
    data_start = start + hlen
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - data_start != nbytes:
        raise FormatError(f"RVOL1 payload has {len(buf) - data_start} bytes, expected {nbytes}",
                          offset=data_start, path=path)
    voxels = np.frombuffer(buf, dtype=dtype, offset=data_start).reshape(dims)
    return Volume(voxels.astype(dtype.newbyteorder("="), copy=True), tuple(spacing), kind)


def write_volume(v: Volume, path: str | Path) -> None:
    Path(path).write_bytes(encode_volume(v))


def read_volume(path: str | Path) -> Volume:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read volume: {exc.strerror}", path=str(path)) from None
    return decode_volume(buf, path=str(path))


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_csv(path: str | Path, header: Sequence[str]) -> list[dict[str, str]]:
    """Read a CSV whose first row must equal ``header``."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        first = next(reader)
    except StopIteration:
        raise FormatError("empty CSV (missing header row)", offset=1, path=str(path)) from None
    if first != list(header):
        raise FormatError(f"unexpected CSV header {first}, expected {list(header)}", offset=1, path=str(path))
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, got {len(row)}", offset=lineno, path=str(path))
        rows.append(dict(zip(header, row)))
    return rows
