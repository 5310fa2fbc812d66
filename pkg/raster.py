"""
Binary PPM (P6) / PGM (P5) raster reader and writer.

Rasters are held in memory as float32 (C, H, W) arrays with values in [0, 1]
scaled from 8-bit samples; writing rounds back to 8-bit, so an image read
from disk round-trips losslessly.
"""

from typing import Tuple

import numpy as np

from boxes import BoundingBox
from errors import RasterDepthError, RasterMagicError, RasterTruncatedError

WHITE = (255, 255, 255)
RED = (255, 0, 0)


def _read_header(data: bytes, path: str) -> Tuple[str, int, int, int, int]:
    """
    Parse a netpbm header.

    Returns:
        Tuple of (magic, width, height, maxval, payload offset)
    """
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise RasterMagicError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")

    tokens = []
    pos = 2
    while len(tokens) < 3:
        # whitespace and comments between header tokens
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise RasterTruncatedError(f"{path}: incomplete header")
        tokens.append(int(data[start:pos]))

    # exactly one whitespace byte separates the header from the payload
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise RasterTruncatedError(f"{path}: missing header terminator")
    width, height, maxval = tokens
    return magic.decode("ascii"), width, height, maxval, pos + 1


def load_raster(path: str) -> np.ndarray:
    """
    Read an 8-bit binary PGM or PPM file.

    Args:
        path: File path

    Returns:
        float32 array (C, H, W) with C = 1 (P5) or 3 (P6), values in [0, 1]

    Raises:
        RasterMagicError: File is not P5/P6
        RasterDepthError: maxval outside 1..255
        RasterTruncatedError: Header or payload shorter than declared
    """
    with open(path, "rb") as f:
        data = f.read()

    magic, width, height, maxval, offset = _read_header(data, path)
    if not 0 < maxval <= 255:
        raise RasterDepthError(f"{path}: unsupported maxval {maxval} (only 8-bit rasters are supported)")
    if width <= 0 or height <= 0:
        raise RasterTruncatedError(f"{path}: invalid extents {width}x{height}")

    channels = 1 if magic == "P5" else 3
    expected = width * height * channels
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise RasterTruncatedError(f"{path}: payload has {len(payload)} bytes, expected {expected}")

    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32) / np.float32(maxval)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Convert a (C, H, W) [0, 1] image to (H, W, C) uint8 samples."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """Convert (H, W, C) uint8 samples to a (C, H, W) float32 [0, 1] image."""
    return np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32) / np.float32(255)


def save_raster(image: np.ndarray, path: str) -> None:
    """
    Write a (C, H, W) [0, 1] image as P5 (C = 1) or P6 (C = 3).

    Args:
        image: Image array
        path: Output file path
    """
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"save_raster expects (1|3, H, W), got shape {image.shape}")
    write_pixels(to_uint8(image), path)


def write_pixels(pixels: np.ndarray, path: str) -> None:
    """Write (H, W, 1|3) uint8 samples as binary PGM/PPM."""
    height, width, channels = pixels.shape
    magic = "P5" if channels == 1 else "P6"
    with open(path, "wb") as f:
        f.write(f"{magic}\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def promote_rgb(pixels: np.ndarray) -> np.ndarray:
    """Return (H, W, 3) samples, replicating a gray channel if needed."""
    if pixels.shape[2] == 3:
        return pixels.copy()
    return np.repeat(pixels, 3, axis=2)


def draw_outline(pixels: np.ndarray, box: BoundingBox, color: Tuple[int, int, int]) -> None:
    """
    Draw a 1-pixel rectangle outline in place, clipped to the image.

    The outline covers columns x .. x+w-1 and rows y .. y+h-1.
    """
    height, width = pixels.shape[:2]
    x0, y0 = int(round(box.x)), int(round(box.y))
    x1, y1 = x0 + int(round(box.w)) - 1, y0 + int(round(box.h)) - 1
    cx0, cx1 = max(x0, 0), min(x1, width - 1)
    cy0, cy1 = max(y0, 0), min(y1, height - 1)
    if cx0 > cx1 or cy0 > cy1:
        return
    rgb = np.asarray(color, dtype=np.uint8)
    if 0 <= y0 < height:
        pixels[y0, cx0:cx1 + 1] = rgb
    if 0 <= y1 < height:
        pixels[y1, cx0:cx1 + 1] = rgb
    if 0 <= x0 < width:
        pixels[cy0:cy1 + 1, x0] = rgb
    if 0 <= x1 < width:
        pixels[cy0:cy1 + 1, x1] = rgb
