"""Raster I/O. Images live in memory as float64 H x W x 3 arrays in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageDecodeError(IOError):
    pass


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def quantize8(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage."""
    return from_uint8(to_uint8(img))


def encode_ppm(img: np.ndarray) -> bytes:
    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 image, got {arr.shape}")
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def _ppm_tokens(buf: bytes, count: int):
    tokens, i = [], 2
    while len(tokens) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ImageDecodeError("truncated PPM header")
        tokens.append(int(buf[start:i]))
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageDecodeError(f"not a binary PPM/PGM (magic {magic!r})")
    try:
        (w, h, maxval), offset = _ppm_tokens(buf, 3)
    except ValueError as exc:
        raise ImageDecodeError(f"malformed PPM header: {exc}") from exc
    if maxval != 255:
        raise ImageDecodeError(f"only 8-bit PPM supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset) if len(buf) - offset >= need else None
    if raster is None:
        raise ImageDecodeError("truncated PPM raster")
    raster = raster.reshape(h, w, channels)
    if channels == 1:
        raster = np.repeat(raster, 3, axis=2)
    return from_uint8(raster)


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "L"):
                raise ImageDecodeError(f"unsupported PNG mode {im.mode}")
            return from_uint8(np.asarray(im.convert("RGB")))
    except (OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        head = path.open("rb").read(8)
    except OSError as exc:
        raise ImageDecodeError(f"cannot open {path}: {exc}") from exc
    if head[:2] in (b"P6", b"P5"):
        return read_ppm(path)
    if head.startswith(b"\x89PNG"):
        return read_png(path)
    raise ImageDecodeError(f"unrecognised image format: {path}")
