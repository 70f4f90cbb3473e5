"""Minimal binary PGM/PPM reading and writing.

8-bit masks use P5 with maxval 255 (values 0/255); id maps use 16-bit P5
(big-endian sample order, per the format); color renderings use P6.
Writers emit a fixed header layout so outputs are byte-stable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataFormatError


def _header(kind: bytes, width: int, height: int, maxval: int) -> bytes:
    return kind + b"\n" + f"{width} {height}\n{maxval}\n".encode("ascii")


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Binary mask as 8-bit P5 with values 0/255."""
    mask = np.asarray(mask)
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(_header(b"P5", w, h, 255) + data.tobytes())


def write_map_pgm(path, ids: np.ndarray) -> None:
    """Integer label map as 16-bit P5 (big-endian samples)."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() > 65535:
        raise DataFormatError(f"{path}: label values outside uint16 range")
    data = ids.astype(">u2")
    h, w = data.shape
    Path(path).write_bytes(_header(b"P5", w, h, 65535) + data.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """8-bit color image as P6."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataFormatError(f"{path}: PPM data must be H x W x 3")
    h, w, _ = rgb.shape
    Path(path).write_bytes(_header(b"P6", w, h, 255) + rgb.tobytes())


def _parse_header(blob: bytes, source: str) -> tuple[bytes, int, int, int, int]:
    if len(blob) < 2 or blob[:1] != b"P" or blob[1:2] not in b"56":
        raise DataFormatError(f"{source}: not a binary PGM/PPM file")
    kind = blob[:2]
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise DataFormatError(f"{source}: truncated header at offset {pos}")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(blob) and blob[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(blob[start:pos]))
        else:
            raise DataFormatError(f"{source}: bad header byte at offset {pos}")
    # Exactly one whitespace byte separates the header from the raster.
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise DataFormatError(f"{source}: missing raster separator at offset {pos}")
    pos += 1
    width, height, maxval = fields
    return kind, width, height, maxval, pos


def read_pgm(path) -> np.ndarray:
    """Read an 8- or 16-bit P5 file to an integer array."""
    source = str(path)
    blob = Path(path).read_bytes()
    kind, width, height, maxval, pos = _parse_header(blob, source)
    if kind != b"P5":
        raise DataFormatError(f"{source}: expected P5, found {kind.decode()}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    expected = width * height * dtype.itemsize
    if len(blob) - pos != expected:
        raise DataFormatError(
            f"{source}: raster truncated at offset {len(blob)} (expected {pos + expected} bytes)"
        )
    data = np.frombuffer(blob, dtype=dtype, count=width * height, offset=pos)
    return data.astype(np.int64).reshape(height, width)


def read_ppm(path) -> np.ndarray:
    source = str(path)
    blob = Path(path).read_bytes()
    kind, width, height, maxval, pos = _parse_header(blob, source)
    if kind != b"P6" or maxval != 255:
        raise DataFormatError(f"{source}: expected 8-bit P6")
    expected = width * height * 3
    if len(blob) - pos != expected:
        raise DataFormatError(f"{source}: raster truncated at offset {len(blob)}")
    data = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=pos)
    return data.reshape(height, width, 3).copy()


def heatmap_rgb(matrix: np.ndarray, cell: int = 16) -> np.ndarray:
    """Grayscale heatmap of a matrix: 0 -> black, 1 -> white, linear, one
    ``cell`` x ``cell`` block per entry."""
    m = np.clip(np.asarray(matrix, dtype=np.float64), 0.0, 1.0)
    gray = np.round(m * 255.0).astype(np.uint8)
    big = np.repeat(np.repeat(gray, cell, axis=0), cell, axis=1)
    return np.stack([big, big, big], axis=2)


def segment_colors(n: int) -> np.ndarray:
    """Deterministic palette (golden-angle hues) for segment rendering."""
    import colorsys

    out = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        hue = (i * 0.6180339887498949) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        out[i] = (round(r * 255), round(g * 255), round(b * 255))
    return out


def panoptic_rgb(ids: np.ndarray) -> np.ndarray:
    """Color rendering of a segment-id map; void (0) renders black."""
    ids = np.asarray(ids)
    top = int(ids.max()) + 1
    palette = np.zeros((top + 1, 3), dtype=np.uint8)
    if top >= 1:
        palette[1:] = segment_colors(top)
    return palette[ids]
