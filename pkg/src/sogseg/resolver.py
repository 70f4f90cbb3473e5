"""Paste box-local mask logits to image scale and remove pairwise overlaps.

The resolve step suppresses each instance's logit inside regions it shares
with instances that cover it, scaled by the overlap relation matrix, and is
differentiable with respect to both the logit stack and the matrix.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import bilinear
from .errors import ConfigError
from .tensorcore import as_tensor, sigmoid

#: Pad value for pasted instance logits: sigmoid(-12) ~ 6e-6, so pixels
#: outside the box read as confident non-membership.
LOGIT_PAD = -12.0


def paste_patch(
    patch: np.ndarray,
    box,
    height: int,
    width: int,
    pad_value: float = LOGIT_PAD,
) -> tuple[np.ndarray, Callable]:
    """Bilinear paste of a 28x28 patch into ``box`` on an H x W canvas.

    Pixels outside the box get ``pad_value``. Returns (image, vjp) where
    vjp(g) scatters cotangents back to the patch through the bilinear
    weights.
    """
    patch = as_tensor(patch)
    if patch.ndim != 2:
        raise ConfigError(f"patch must be 2-d, got shape {patch.shape}")
    ph, pw = patch.shape
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise ConfigError(f"degenerate box (w={w}, h={h})")
    c_lo, c_hi = bilinear.covered_range(x, w, width)
    r_lo, r_hi = bilinear.covered_range(y, h, height)
    out = np.full((height, width), float(pad_value), dtype=np.float64)
    if c_hi <= c_lo or r_hi <= r_lo:
        return out, lambda g: np.zeros_like(patch)

    # Map covered pixel centers into patch coordinates (corner-aligned).
    cols = np.arange(c_lo, c_hi, dtype=np.float64)
    rows = np.arange(r_lo, r_hi, dtype=np.float64)
    pc = (cols - x) * ((pw - 1) / (w - 1)) if w != 1 else np.zeros_like(cols)
    pr = (rows - y) * ((ph - 1) / (h - 1)) if h != 1 else np.zeros_like(rows)
    pc = np.clip(pc, 0.0, pw - 1.0)
    pr = np.clip(pr, 0.0, ph - 1.0)
    out[r_lo:r_hi, c_lo:c_hi] = bilinear.sample(patch, pr[:, None], pc[None, :])

    def vjp(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        region = g[r_lo:r_hi, c_lo:c_hi]
        return bilinear.scatter_weights((ph, pw), pr[:, None], pc[None, :], region)

    return out, vjp


def paste_stack(patches: np.ndarray, boxes: np.ndarray, height: int, width: int,
                pad_value: float = LOGIT_PAD) -> tuple[np.ndarray, Callable]:
    """Paste one patch per instance into an H x W x N stack."""
    patches = as_tensor(patches)
    n = patches.shape[0]
    stack = np.empty((height, width, n), dtype=np.float64)
    vjps = []
    for i in range(n):
        stack[:, :, i], v = paste_patch(patches[i], boxes[i], height, width, pad_value)
        vjps.append(v)

    def vjp(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        return np.stack([vjps[i](g[:, :, i]) for i in range(n)], axis=0)

    return stack, vjp


def resolve(stack: np.ndarray, overlaps: np.ndarray) -> tuple[np.ndarray, Callable]:
    """Differentiable overlap removal on an H x W x N logit stack.

    Per channel i: A'_i = A_i * (1 - s(A_i) * sum_j s(A_j) * O_ij), where s
    is the sigmoid. Channels that cover others (O_ji > 0, O_ij = 0) are left
    untouched by that pair. Returns (resolved stack, vjp(g) -> (dA, dO)).
    """
    a = as_tensor(stack)
    o = as_tensor(overlaps)
    if a.ndim != 3:
        raise ConfigError(f"logit stack must be H x W x N, got shape {a.shape}")
    n = a.shape[2]
    if o.shape != (n, n):
        raise ConfigError(f"overlap matrix shape {o.shape} does not match {n} channels")
    s = sigmoid(a)
    hw = a.shape[0] * a.shape[1]
    s_flat = s.reshape(hw, n)
    # Mode-3 contraction: coverage pressure on channel i from all j.
    t = (s_flat @ o.T).reshape(a.shape)
    out = a - a * s * t

    def vjp(g: np.ndarray):
        g = np.asarray(g, dtype=np.float64).reshape(a.shape)
        s_prime = s * (1.0 - s)
        d_t = -g * a * s
        d_t_flat = d_t.reshape(hw, n)
        d_a = g * (1.0 - s * t) + (-g * a * t + (d_t_flat @ o).reshape(a.shape)) * s_prime
        d_o = d_t_flat.T @ s_flat
        return d_a, d_o

    return out, vjp
