"""Binary netpbm reading/writing and luminance conversion.

Grayscale images are PGM (P5, maxval 255); RGB sources are PPM (P6) and
are reduced to luminance with the BT.601 weights, rounded to 8 bits.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument

_LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _read_header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Parse `count` whitespace-separated integers, skipping '#' comments."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise InvalidArgument("truncated netpbm header")
        c = data[i : i + 1]
        if c == b"#":
            i = data.find(b"\n", i)
            if i < 0:
                raise InvalidArgument("truncated netpbm comment")
            i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(int(data[i:j]))
            i = j
    return tokens, i + 1  # single whitespace byte terminates the header


def _read_netpbm(path: str) -> tuple[bytes, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise InvalidArgument(f"{path}: not a binary PGM/PPM file")
    (width, height, maxval), offset = _read_header_tokens(data[2:], 3)
    if maxval != 255:
        raise InvalidArgument(f"{path}: only maxval 255 is supported")
    channels = 1 if magic == b"P5" else 3
    n = width * height * channels
    raw = data[2 + offset : 2 + offset + n]
    if len(raw) != n:
        raise InvalidArgument(f"{path}: truncated pixel payload")
    pixels = np.frombuffer(raw, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return magic, pixels.reshape(shape)


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM (P5) file into a (H, W) uint8 array."""
    magic, img = _read_netpbm(path)
    if magic != b"P5":
        raise InvalidArgument(f"{path}: expected P5, got {magic.decode()}")
    return img


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM (P5, maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise InvalidArgument("PGM images must be 2-D")
    img = img.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 weighted sum, rounded half up to 8-bit."""
    r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
    luma = _LUMA_WEIGHTS[0] * r + _LUMA_WEIGHTS[1] * g + _LUMA_WEIGHTS[2] * b
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def read_image_gray(path: str) -> np.ndarray:
    """Read a P5 or P6 file as 8-bit luminance."""
    magic, img = _read_netpbm(path)
    return img if magic == b"P5" else rgb_to_luma(img)
