"""Binary and text file formats.

UGB  grid container: ``UGB1`` magic, u8 version, u8 dtype (0=f32, 1=u8),
     u8 ndim (=3), ndim x u32 LE dims, then the row-major payload.
UCKP checkpoint container: ``UCKP`` magic, u8 version, u32 entry count, then
     per entry a u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims and an
     f32 payload.

Key=value files are plain text, one ``key=value`` per line; ``#`` starts a
comment. Repeated keys are kept in order.
"""

from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import FormatError

UGB_MAGIC = b"UGB1"
UGB_VERSION = 1
UCKP_MAGIC = b"UCKP"
UCKP_VERSION = 1

_UGB_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_UGB_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
_U32_MAX = 2**32 - 1


def ugb_header(shape: tuple[int, ...], dtype) -> bytes:
    dtype = np.dtype(dtype)
    if dtype not in _UGB_CODES:
        raise FormatError(f"UGB supports float32 and uint8 payloads, got {dtype}")
    if len(shape) != 3:
        raise FormatError(f"UGB stores 3-D arrays, got ndim={len(shape)}")
    if any(d < 0 or d > _U32_MAX for d in shape):
        raise FormatError(f"dimension overflow in {shape}")
    return UGB_MAGIC + struct.pack("<BBB", UGB_VERSION, _UGB_CODES[dtype], 3) + struct.pack("<3I", *shape)


def encode_ugb(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        if not np.all(np.isfinite(array)):
            raise FormatError("refusing to write non-finite values")
        array = array.astype("<f4", copy=False)
    elif array.dtype == np.uint8 or array.dtype == np.bool_:
        array = array.astype(np.uint8, copy=False)
    else:
        raise FormatError(f"unsupported dtype {array.dtype}")
    header = ugb_header(array.shape, array.dtype)
    return header + np.ascontiguousarray(array).tobytes(order="C")


def decode_ugb(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != UGB_MAGIC:
        raise FormatError("bad magic: not a UGB file")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != UGB_VERSION:
        raise FormatError(f"unsupported UGB version {version}")
    if code not in _UGB_DTYPES:
        raise FormatError(f"unknown UGB dtype code {code}")
    if ndim != 3:
        raise FormatError(f"UGB ndim must be 3, got {ndim}")
    if len(buf) < 7 + 4 * ndim:
        raise FormatError("truncated UGB header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = _UGB_DTYPES[code]
    count = int(np.prod(dims, dtype=object))
    nbytes = count * dtype.itemsize
    start = 7 + 4 * ndim
    if nbytes > 2**40:
        raise FormatError(f"dimension overflow: {dims}")
    if len(buf) - start < nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes, found {len(buf) - start}")
    if len(buf) - start > nbytes:
        raise FormatError("trailing bytes after UGB payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims)
    if dtype.kind == "f":
        data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise FormatError("UGB payload contains non-finite values")
    else:
        data = data.copy()
    return data


def write_ugb(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_ugb(array))


def read_ugb(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_ugb(buf)


# -- checkpoints -----------------------------------------------------------

def encode_uckp(entries: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(UCKP_MAGIC)
    out.write(struct.pack("<BI", UCKP_VERSION, len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        arr = np.asarray(arr, dtype="<f4")
        if arr.ndim > 255:
            raise FormatError("too many dimensions")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr).tobytes())
    return out.getvalue()


def decode_uckp(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 9 or buf[:4] != UCKP_MAGIC:
        raise FormatError("bad magic: not a UCKP checkpoint")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != UCKP_VERSION:
        raise FormatError(f"unsupported UCKP version {version}")
    pos = 9
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError("truncated entry name")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            if pos + 4 * n > len(buf):
                raise FormatError(f"truncated payload for entry {name!r}")
            entries[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint entries")
    return entries


def write_uckp(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_uckp(entries))


def read_uckp(path) -> "OrderedDict[str, np.ndarray]":
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_uckp(buf)


# -- key=value text --------------------------------------------------------

def parse_kv(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def read_kv(path) -> list[tuple[str, str]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return parse_kv(text)


def format_kv(pairs: Iterable[tuple[str, object]]) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs)


def write_kv(path, pairs: Iterable[tuple[str, object]]) -> None:
    Path(path).write_text(format_kv(pairs))


# -- netpbm images ---------------------------------------------------------

def write_pgm(path, frame: np.ndarray) -> None:
    """8-bit grayscale, scaled so the frame maximum maps to 255."""
    frame = np.asarray(frame, dtype=np.float64)
    peak = frame.max() if frame.size else 0.0
    if peak > 0:
        pix = np.clip(np.round(frame / peak * 255.0), 0, 255).astype(np.uint8)
    else:
        pix = np.zeros(frame.shape, dtype=np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def signed_colormap(values: np.ndarray) -> np.ndarray:
    """Linear blue-white-red RGB map, symmetric around zero at max |value|."""
    values = np.asarray(values, dtype=np.float64)
    vmax = np.abs(values).max() if values.size else 0.0
    t = values / vmax if vmax > 0 else np.zeros_like(values)
    rgb = np.empty(values.shape + (3,), dtype=np.float64)
    pos = np.clip(t, 0.0, 1.0)
    neg = np.clip(-t, 0.0, 1.0)
    rgb[..., 0] = 255.0 * (1.0 - neg)
    rgb[..., 1] = 255.0 * (1.0 - pos - neg)
    rgb[..., 2] = 255.0 * (1.0 - pos)
    return np.round(rgb).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_netpbm(path) -> np.ndarray:
    # Only the header layout emitted by write_pgm/write_ppm is supported.
    buf = Path(path).read_bytes()
    kind, size, _maxval, payload = buf.split(b"\n", 3)
    w, h = (int(v) for v in size.split())
    if kind == b"P5":
        return np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w)
    if kind == b"P6":
        return np.frombuffer(payload, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    raise FormatError(f"unsupported netpbm kind {kind!r}")


def file_digest(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sidecar_path(path) -> str:
    return os.fspath(path) + ".meta"
