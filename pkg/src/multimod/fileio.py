"""On-disk formats: raw ``.ten`` tensors and 8-bit PGM/PPM rasters.

``.ten`` is a tiny self-describing container for float arrays:

====== ======================================================
bytes  meaning
====== ======================================================
4      magic ``TEN1``
1      dtype code: 1 = float32, 2 = float64
1      rank (number of dimensions), 0..8
4*rank extents, little-endian uint32, outermost first
rest   payload, row-major, little-endian
====== ======================================================

PGM (P5) and PPM (P6) are the usual binary netpbm formats with maxval 255.
Images load as float32 in [0, 1]; saving clamps to [0, 1] and quantises with
round-to-nearest, so save/load round-trips bytes exactly and values to
within 1/510.
"""

from __future__ import annotations

import io
import os
from typing import Union

import numpy as np

_MAGIC = b"TEN1"
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_MAX_RANK = 8

PathLike = Union[str, os.PathLike]


def save_tensor(path: PathLike, arr: np.ndarray) -> None:
    """Write a float32/float64 array as a ``.ten`` file."""
    arr = np.asarray(arr)
    code = _DTYPE_TO_CODE.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"save_tensor: unsupported dtype {arr.dtype} (float32/float64 only)")
    if arr.ndim > _MAX_RANK:
        raise ValueError(f"save_tensor: rank {arr.ndim} exceeds {_MAX_RANK}")
    header = bytearray(_MAGIC)
    header.append(code)
    header.append(arr.ndim)
    for extent in arr.shape:
        if extent >= 2**32:
            raise ValueError(f"save_tensor: extent {extent} does not fit in uint32")
        header += np.array(extent, dtype="<u4").tobytes()
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(payload)


def load_tensor(path: PathLike) -> np.ndarray:
    """Read a ``.ten`` file back into a numpy array (native byte order)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 6:
        raise ValueError(f"{path}: too short to be a tensor file")
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC!r}")
    code, rank = raw[4], raw[5]
    if code not in _CODE_TO_DTYPE:
        raise ValueError(f"{path}: unknown dtype code {code}")
    if rank > _MAX_RANK:
        raise ValueError(f"{path}: rank {rank} exceeds {_MAX_RANK}")
    offset = 6
    if len(raw) < offset + 4 * rank:
        raise ValueError(f"{path}: truncated shape header")
    shape = tuple(
        int(v) for v in np.frombuffer(raw, dtype="<u4", count=rank, offset=offset)
    )
    offset += 4 * rank
    dtype = _CODE_TO_DTYPE[code]
    count = 1
    for extent in shape:
        count *= extent
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload is {len(raw) - offset} bytes, "
            f"expected {count * dtype.itemsize} for shape {shape}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_pgm(path: PathLike, arr: np.ndarray) -> None:
    """Write a 2D array of [0, 1] floats as binary PGM (P5, maxval 255)."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"save_pgm: expected 2D array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(_quantize(arr).tobytes())


def save_ppm(path: PathLike, arr: np.ndarray) -> None:
    """Write a (3, H, W) array of [0, 1] floats as binary PPM (P6, maxval 255)."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"save_ppm: expected (3, H, W) array, got shape {arr.shape}")
    _, h, w = arr.shape
    pixels = np.transpose(_quantize(arr), (1, 2, 0))  # HWC interleaved
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())


def _read_netpbm_header(f: io.BufferedReader, path: PathLike, magic: bytes) -> tuple:
    got = f.read(2)
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
    fields = []
    while len(fields) < 3:
        ch = f.read(1)
        if not ch:
            raise ValueError(f"{path}: header ended early")
        if ch == b"#":  # comment to end of line
            while ch and ch != b"\n":
                ch = f.read(1)
            continue
        if ch.isspace():
            continue
        token = ch
        ch = f.read(1)
        while ch and not ch.isspace() and ch != b"#":
            token += ch
            ch = f.read(1)
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
        if not token.isdigit():
            raise ValueError(f"{path}: non-numeric header field {token!r}")
        fields.append(int(token))
        # the byte just consumed after the last field is the single
        # whitespace separating header from payload
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval} (only 255)")
    if w < 1 or h < 1:
        raise ValueError(f"{path}: bad image size {w}x{h}")
    return w, h


def load_pgm(path: PathLike) -> np.ndarray:
    """Read binary PGM into a (H, W) float32 array scaled to [0, 1]."""
    with open(path, "rb") as f:
        w, h = _read_netpbm_header(f, path, b"P5")
        payload = f.read()
    if len(payload) != w * h:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {w * h}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float32) / 255.0


def load_ppm(path: PathLike) -> np.ndarray:
    """Read binary PPM into a (3, H, W) float32 array scaled to [0, 1]."""
    with open(path, "rb") as f:
        w, h = _read_netpbm_header(f, path, b"P6")
        payload = f.read()
    if len(payload) != 3 * w * h:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {3 * w * h}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1))).astype(np.float32) / 255.0
