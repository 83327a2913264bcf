"""Binary PGM/PPM images and atomic file writes."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Malformed image file; ``offset`` is the byte where parsing failed."""

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: {reason} at byte offset {offset}")
        self.path = str(path)
        self.offset = offset


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _encode(magic: bytes, pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def save_image(path, image: np.ndarray) -> None:
    """Write a [0,1] grayscale image as 8-bit binary PGM (P5)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"grayscale image must be 2-D, got shape {image.shape}")
    atomic_write_bytes(path, _encode(b"P5", to_bytes(image)))


def save_color_image(path, image: np.ndarray) -> None:
    """Write a [0,1] RGB image [H, W, 3] as 8-bit binary PPM (P6)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"color image must be [H, W, 3], got {image.shape}")
    atomic_write_bytes(path, _encode(b"P6", to_bytes(image)))


def _read_token(raw: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(raw)
    while pos < n:
        if raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif raw[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError(path, start, "unexpected end of header")
    return raw[start:pos], pos


def _decode(path, expected_magic: bytes, channels: int, expected_shape=None) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, pos = _read_token(raw, 0, path)
    if magic != expected_magic:
        raise ImageFormatError(path, 0, f"expected magic {expected_magic!r}, found {magic[:8]!r}")
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(raw, pos, path)
        if not tok.isdigit():
            raise ImageFormatError(path, start, f"non-numeric header field {tok[:16]!r}")
        fields.append((int(tok), start))
    (w, w_at), (h, h_at), (maxval, m_at) = fields
    if w <= 0 or h <= 0:
        raise ImageFormatError(path, w_at if w <= 0 else h_at, f"invalid dimensions {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(path, m_at, f"unsupported maxval {maxval}")
    if expected_shape is not None and (h, w) != tuple(expected_shape):
        raise ImageFormatError(path, w_at, f"dimensions {h}x{w} differ from expected {expected_shape[0]}x{expected_shape[1]}")
    pos += 1  # single whitespace after maxval
    need = w * h * channels
    if len(raw) - pos != need:
        raise ImageFormatError(path, min(len(raw), pos + need), f"pixel payload has {len(raw) - pos} bytes, expected {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return pixels.reshape(shape).astype(np.float64) / 255.0


def load_image(path, expected_shape=None) -> np.ndarray:
    """Read a binary PGM into a float64 array in [0,1]."""
    return _decode(path, b"P5", 1, expected_shape)


def load_color_image(path) -> np.ndarray:
    return _decode(path, b"P6", 3)
