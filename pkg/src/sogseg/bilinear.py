"""Bilinear sampling on pixel-center grids.

Convention used everywhere in this package: a box ``(x, y, w, h)`` covers the
continuous pixel-center range ``[x, x + w - 1] x [y, y + h - 1]`` (top-left
origin, column = x, row = y). A k-sample grid over a box is corner-aligned:
sample 0 sits on the box's first covered pixel center and sample k-1 on the
last, so a box spanning the whole image resamples it identically.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def box_grid(origin: float, extent: float, n: int) -> np.ndarray:
    """Corner-aligned sample coordinates along one axis of a box."""
    if extent <= 0:
        raise ConfigError(f"degenerate box extent {extent}")
    if extent == 1:
        return np.full(n, float(origin))
    return origin + np.arange(n, dtype=np.float64) * ((extent - 1.0) / (n - 1))


def sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear sample of ``img`` at broadcastable (rows, cols) coordinates.

    Coordinates outside the image clamp to the nearest edge pixel.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    rows, cols = np.broadcast_arrays(rows, cols)
    r0f = np.floor(rows)
    c0f = np.floor(cols)
    tr = rows - r0f
    tc = cols - c0f
    r0 = np.clip(r0f.astype(np.int64), 0, h - 1)
    r1 = np.clip(r0f.astype(np.int64) + 1, 0, h - 1)
    c0 = np.clip(c0f.astype(np.int64), 0, w - 1)
    c1 = np.clip(c0f.astype(np.int64) + 1, 0, w - 1)
    top = img[r0, c0] * (1.0 - tc) + img[r0, c1] * tc
    bot = img[r1, c0] * (1.0 - tc) + img[r1, c1] * tc
    return top * (1.0 - tr) + bot * tr


def scatter_weights(
    shape: tuple[int, int],
    rows: np.ndarray,
    cols: np.ndarray,
    values: np.ndarray,
) -> np.ndarray:
    """Adjoint of :func:`sample`: scatter ``values`` back through the
    bilinear weights into an array of ``shape``."""
    h, w = shape
    rows, cols, values = np.broadcast_arrays(rows, cols, values)
    out = np.zeros(shape, dtype=np.float64)
    r0f = np.floor(rows)
    c0f = np.floor(cols)
    tr = rows - r0f
    tc = cols - c0f
    r0 = np.clip(r0f.astype(np.int64), 0, h - 1)
    r1 = np.clip(r0f.astype(np.int64) + 1, 0, h - 1)
    c0 = np.clip(c0f.astype(np.int64), 0, w - 1)
    c1 = np.clip(c0f.astype(np.int64) + 1, 0, w - 1)
    np.add.at(out, (r0, c0), values * (1.0 - tr) * (1.0 - tc))
    np.add.at(out, (r0, c1), values * (1.0 - tr) * tc)
    np.add.at(out, (r1, c0), values * tr * (1.0 - tc))
    np.add.at(out, (r1, c1), values * tr * tc)
    return out


def covered_range(origin: float, extent: float, limit: int) -> tuple[int, int]:
    """Integer pixel indices covered by a box along one axis, clipped to the
    image; returns (first, last_exclusive), possibly empty."""
    if extent <= 0:
        raise ConfigError(f"degenerate box extent {extent}")
    first = int(np.ceil(origin))
    last = int(np.floor(origin + extent - 1.0))
    return max(first, 0), min(last, limit - 1) + 1
