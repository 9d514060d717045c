"""
Raster Utilities Module

Binary NetPBM I/O: PGM (P5) for masks and label maps, PPM (P6) for images and
colorized quality-assessment overlays. Only maxval 255 is accepted. Header
problems are reported with the byte offset at which parsing failed.
"""
from typing import Tuple
import logging
import os

import numpy as np

from utils.error_utils import RasterFormatError, ShapeError, validate_binary_mask, validate_label_map

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

MAXVAL = 255
MISSED_COLOR = (0, 255, 0)
MISTAKEN_COLOR = (255, 0, 0)
_WHITESPACE = b" \t\n\r\v\f"


def encode_netpbm(pixels: np.ndarray) -> bytes:
    """
    Encode (H, W) uint8 as P5 or (H, W, 3) uint8 as P6.

    Raises:
        ShapeError: For any other shape
    """
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError("NetPBM pixels must be (H, W) or (H, W, 3)", {'actual': list(pixels.shape)})
    if pixels.dtype != np.uint8:
        if pixels.min(initial=0) < 0 or pixels.max(initial=0) > MAXVAL:
            raise ShapeError("Pixel values must lie in 0..255")
        pixels = pixels.astype(np.uint8)
    height, width = pixels.shape[:2]
    header = magic + f"\n{width} {height}\n{MAXVAL}\n".encode("ascii")
    return header + np.ascontiguousarray(pixels).tobytes()


def _skip_separators(buffer: bytes, offset: int) -> int:
    """Advance past whitespace and '#' comments."""
    while offset < len(buffer):
        byte = buffer[offset]
        if byte == ord("#"):
            while offset < len(buffer) and buffer[offset] not in b"\n\r":
                offset += 1
        elif byte in _WHITESPACE:
            offset += 1
        else:
            break
    return offset


def _read_integer(buffer: bytes, offset: int, field: str) -> Tuple[int, int]:
    offset = _skip_separators(buffer, offset)
    start = offset
    while offset < len(buffer) and buffer[offset:offset + 1].isdigit():
        offset += 1
    if start == offset:
        raise RasterFormatError(f"Expected an integer {field} in the header",
                                {'offset': start, 'field': field})
    return int(buffer[start:offset]), offset


def decode_netpbm(buffer: bytes) -> np.ndarray:
    """
    Decode a P5 or P6 buffer.

    Returns:
        (H, W) uint8 for P5, (H, W, 3) uint8 for P6

    Raises:
        RasterFormatError: On a malformed header, a maxval other than 255, or
            truncated or trailing pixel data; details carry the byte offset
    """
    magic = buffer[:2]
    if magic not in (b"P5", b"P6"):
        raise RasterFormatError("Unsupported NetPBM magic number", {'offset': 0, 'magic': magic.decode("latin-1")})
    width, offset = _read_integer(buffer, 2, "width")
    height, offset = _read_integer(buffer, offset, "height")
    maxval_offset = _skip_separators(buffer, offset)
    maxval, offset = _read_integer(buffer, offset, "maxval")
    if width < 1 or height < 1:
        raise RasterFormatError("Image dimensions must be positive",
                                {'offset': maxval_offset, 'width': width, 'height': height})
    if maxval != MAXVAL:
        raise RasterFormatError("Unexpected maxval; only 255 is supported",
                                {'offset': maxval_offset, 'maxval': maxval})
    if offset >= len(buffer) or buffer[offset] not in _WHITESPACE:
        raise RasterFormatError("Expected a single whitespace byte after maxval", {'offset': offset})
    offset += 1
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    available = len(buffer) - offset
    if available != expected:
        raise RasterFormatError("Pixel data length does not match the header",
                                {'offset': offset + min(available, expected),
                                 'expected_bytes': expected, 'actual_bytes': available})
    pixels = np.frombuffer(buffer, dtype=np.uint8, count=expected, offset=offset)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return pixels.reshape(shape).copy()


def _write(path: str, pixels: np.ndarray) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_netpbm(pixels))
    logger.debug(f"Wrote {path}")


def _read(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_netpbm(f.read())


def write_mask(path: str, mask: np.ndarray) -> None:
    """Binary mask {0, 1} stored as 0/255 in a PGM."""
    validate_binary_mask(mask, "mask")
    _write(path, np.asarray(mask).astype(np.uint8) * 255)


def read_mask(path: str) -> np.ndarray:
    """
    Raises:
        RasterFormatError: If the file holds values other than 0 and 255
    """
    pixels = _read(path)
    if pixels.ndim != 2:
        raise RasterFormatError("A mask must be a PGM (P5) file", {'offset': 0, 'path': path})
    bad = np.flatnonzero((pixels != 0) & (pixels != 255))
    if bad.size:
        raise RasterFormatError("Mask pixels must be 0 or 255",
                                {'path': path, 'pixel_index': int(bad[0]), 'value': int(pixels.flat[bad[0]])})
    return (pixels // 255).astype(np.uint8)


def write_labels(path: str, labels: np.ndarray) -> None:
    """Label map {0, 1, 2} stored verbatim in a PGM."""
    validate_label_map(labels, "labels")
    _write(path, np.asarray(labels).astype(np.uint8))


def read_labels(path: str) -> np.ndarray:
    pixels = _read(path)
    if pixels.ndim != 2:
        raise RasterFormatError("A label map must be a PGM (P5) file", {'offset': 0, 'path': path})
    validate_label_map(pixels, f"labels in {path}")
    return pixels


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float image in [0, 1] to (H, W, 3) bytes."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(np.moveaxis(image, 0, -1) * 255.0).astype(np.uint8)


def write_image(path: str, image: np.ndarray) -> None:
    """
    Store a (3, H, W) image in [0, 1] as a PPM. Values that are multiples of
    1/255 round-trip exactly.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError("Images must be (3, H, W)", {'actual': list(image.shape)})
    _write(path, to_uint8(image))


def read_image(path: str) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]."""
    pixels = _read(path)
    if pixels.ndim != 3:
        raise RasterFormatError("An image must be a PPM (P6) file", {'offset': 0, 'path': path})
    return np.moveaxis(pixels, -1, 0).astype(np.float32) / np.float32(255.0)


def grayscale(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float image to (H, W) uint8 luma."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    luma = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return np.rint(luma * 255.0).astype(np.uint8)


def colorize(labels: np.ndarray, image: np.ndarray) -> np.ndarray:
    """
    Overlay: missed pure green, mistaken pure red, background the gray image.

    Returns:
        (H, W, 3) uint8
    """
    validate_label_map(labels, "labels")
    gray = grayscale(image)
    if gray.shape != np.asarray(labels).shape:
        raise ShapeError("Labels and image differ in size",
                         {'labels': list(np.shape(labels)), 'image': list(gray.shape)})
    overlay = np.repeat(gray[..., None], 3, axis=-1)
    overlay[labels == 1] = MISSED_COLOR
    overlay[labels == 2] = MISTAKEN_COLOR
    return overlay


def write_overlay(path: str, labels: np.ndarray, image: np.ndarray) -> None:
    _write(path, colorize(labels, image))
