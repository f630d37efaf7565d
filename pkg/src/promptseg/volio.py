"""On-disk grid format: binary little-endian payload plus a text sidecar header.

A grid named ``x.vol`` is stored as the raw payload in ``x.vol`` and a UTF-8
``key:value`` header in ``x.vol.hdr``.  Header keys: ``dims=D,H,W``,
``spacing=sz,sy,sx``, ``channels=C``, ``dtype=f32|u8``, ``crc32=<hex>``.
Payload element order is channel-major, then z, y, x (x fastest).
"""

from __future__ import annotations

import os
import zlib

import numpy as np

from .errors import BadChecksum, DimMismatch, MissingHeader, NonFiniteData
from .grids import LabelMap, LogitTensor, Volume

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("uint8"), "f64": np.dtype("<f8")}


def write_header(path: str, fields: dict) -> None:
    lines = [f"{k}={v}" for k, v in fields.items()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_header(path: str) -> dict:
    if not os.path.exists(path):
        raise MissingHeader(f"missing header sidecar {path}")
    fields = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MissingHeader(f"malformed header line in {path}: {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    return fields


def _fmt_floats(values) -> str:
    # repr round-trips doubles exactly through the text header
    return ",".join(repr(float(v)) for v in values)


def save_grid(grid: Volume | LabelMap | LogitTensor, path: str) -> None:
    """Write any of the three grid types to ``path`` (+ ``path.hdr``)."""
    if isinstance(grid, LabelMap):
        dtype, channels, payload = "u8", 1, grid.data.astype(np.uint8)
    elif isinstance(grid, LogitTensor):
        dtype, channels, payload = "f32", grid.channels, grid.data.astype("<f4")
    elif isinstance(grid, Volume):
        dtype, channels, payload = "f32", 1, grid.data.astype("<f4")
    else:
        raise DimMismatch(f"cannot save object of type {type(grid).__name__}")
    dims = grid.dims
    raw = payload.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(raw)
    write_header(
        path + ".hdr",
        {
            "dims": ",".join(str(d) for d in dims),
            "spacing": _fmt_floats(grid.spacing),
            "channels": channels,
            "dtype": dtype,
            "crc32": f"{zlib.crc32(raw):08x}",
        },
    )


def _load_raw(path: str):
    hdr = read_header(path + ".hdr")
    try:
        dims = tuple(int(v) for v in hdr["dims"].split(","))
        spacing = tuple(float(v) for v in hdr["spacing"].split(","))
        channels = int(hdr.get("channels", "1"))
        dtype = hdr["dtype"]
        crc = int(hdr["crc32"], 16)
    except (KeyError, ValueError) as exc:
        raise MissingHeader(f"bad header {path}.hdr: {exc}") from exc
    if dtype not in _DTYPES:
        raise MissingHeader(f"unknown dtype {dtype!r} in {path}.hdr")
    with open(path, "rb") as fh:
        raw = fh.read()
    if zlib.crc32(raw) != crc:
        raise BadChecksum(f"payload checksum mismatch for {path}")
    np_dtype = _DTYPES[dtype]
    expected = channels * dims[0] * dims[1] * dims[2] * np_dtype.itemsize
    if len(raw) != expected:
        raise DimMismatch(
            f"{path}: payload is {len(raw)} bytes, header declares {expected}"
        )
    data = np.frombuffer(raw, dtype=np_dtype)
    shape = (channels,) + dims if channels > 1 else dims
    return data.reshape(shape), spacing, dtype, channels


def load_volume(path: str) -> Volume:
    data, spacing, dtype, channels = _load_raw(path)
    if dtype != "f32" or channels != 1:
        raise DimMismatch(f"{path} is not a scalar f32 volume")
    arr = data.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteData(f"{path} contains non-finite values")
    return Volume(arr, spacing)


def load_labelmap(path: str) -> LabelMap:
    data, spacing, dtype, channels = _load_raw(path)
    if dtype != "u8" or channels != 1:
        raise DimMismatch(f"{path} is not a u8 label map")
    return LabelMap(data.copy(), spacing)


def load_logits(path: str) -> LogitTensor:
    data, spacing, dtype, channels = _load_raw(path)
    if dtype != "f32":
        raise DimMismatch(f"{path} is not an f32 logit tensor")
    if channels == 1 and data.ndim == 3:
        data = data[None]
    arr = data.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteData(f"{path} contains non-finite values")
    return LogitTensor(arr, spacing)


def save_volume(volume: Volume, path: str) -> None:
    save_grid(volume, path)


def save_labelmap(labels: LabelMap, path: str) -> None:
    save_grid(labels, path)


def save_logits(logits: LogitTensor, path: str) -> None:
    save_grid(logits, path)
