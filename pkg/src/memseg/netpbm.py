"""Binary PPM (P6) and PGM (P5) with maxval 255."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (at byte {offset})")


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n" + f"{width} {height}\n255\n".encode("ascii")


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs an (H, W, 3) uint8 array, got {rgb.shape} {rgb.dtype}")
    return _header(b"P6", rgb.shape[1], rgb.shape[0]) + np.ascontiguousarray(rgb).tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM needs an (H, W) uint8 array, got {gray.shape} {gray.dtype}")
    return _header(b"P5", gray.shape[1], gray.shape[0]) + np.ascontiguousarray(gray).tobytes()


def _tokens(buf: bytes, pos: int, count: int) -> tuple[list[int], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError("malformed header: expected a decimal number", start)
        out.append(int(buf[start:pos]))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise NetpbmError("malformed header: expected whitespace after maxval", pos)
    return out, pos + 1


def decode(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"bad magic {magic!r}, expected P5 or P6", 0)
    (width, height, maxval), pos = _tokens(buf, 2, 3)
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval}", pos - 1)
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    actual = len(buf) - pos
    if actual < expected:
        raise NetpbmError(f"truncated pixel data: expected {expected} bytes, got {actual}", pos)
    data = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    arr = decode(Path(path).read_bytes())
    if arr.ndim != 3:
        raise NetpbmError(f"{path}: expected a P6 file", 0)
    return arr


def read_pgm(path) -> np.ndarray:
    arr = decode(Path(path).read_bytes())
    if arr.ndim != 2:
        raise NetpbmError(f"{path}: expected a P5 file", 0)
    return arr


def write_ppm(path, rgb: np.ndarray):
    Path(path).write_bytes(encode_ppm(rgb))


def write_pgm(path, gray: np.ndarray):
    Path(path).write_bytes(encode_pgm(gray))
