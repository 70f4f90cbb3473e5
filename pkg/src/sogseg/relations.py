"""Ground-truth relation matrices, relation losses, overlap accuracy, and
overlap-based instance filtering.

Two targets are derived from annotations: a symmetric matrix marking pairs
whose intersection covers at least 10% of the smaller instance, and an
asymmetric matrix inferring who covers whom from which visible mask claims
the majority of the intersection. Ties (including empty evidence) yield no
relation.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .tensorcore import as_tensor

#: Intersection-over-smaller threshold marking a significant overlap.
OVERLAP_RATIO_THRESHOLD = 0.1

#: Decision threshold on overlap-matrix entries for accuracy counting.
DECISION_THRESHOLD = 0.5


def _mask_stack(masks: Sequence[np.ndarray]) -> np.ndarray:
    stack = np.asarray([np.asarray(m, dtype=bool) for m in masks])
    if stack.ndim != 3:
        raise ConfigError("masks must be a sequence of H x W arrays")
    return stack


def sym_relation(amodal: Sequence[np.ndarray]) -> np.ndarray:
    """Symmetric 0/1 matrix of significant pairwise overlaps.

    Entry (i, j) is 1 iff |M_i & M_j| / min(|M_i|, |M_j|) >= 0.1 for i != j.
    Empty masks have area 0 and relate to nothing.
    """
    stack = _mask_stack(amodal)
    n = stack.shape[0]
    flat = stack.reshape(n, -1).astype(np.float64)
    areas = flat.sum(axis=1)
    inter = flat @ flat.T
    smaller = np.minimum(areas[:, None], areas[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(smaller > 0, inter / np.maximum(smaller, 1.0), 0.0)
    rel = (ratio >= OVERLAP_RATIO_THRESHOLD).astype(np.float64)
    np.fill_diagonal(rel, 0.0)
    return rel


def approx_overlap_gt(
    amodal: Sequence[np.ndarray], visible: Sequence[np.ndarray]
) -> np.ndarray:
    """Asymmetric who-covers-whom matrix from annotation differences.

    For each significantly overlapping pair, the instance whose visible mask
    holds the strict majority of the amodal intersection is the coverer:
    entry (i, j) = 1 means i is covered by j. Even splits leave both zero.
    """
    am = _mask_stack(amodal)
    vis = _mask_stack(visible)
    if am.shape != vis.shape:
        raise ConfigError(f"amodal {am.shape} and visible {vis.shape} shapes differ")
    if np.any(vis & ~am):
        raise ConfigError("visible mask extends outside its amodal mask")
    n = am.shape[0]
    rel = sym_relation(amodal)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            if rel[i, j] == 0.0:
                continue
            inter = am[i] & am[j]
            kept_i = int(np.count_nonzero(inter & vis[i]))
            kept_j = int(np.count_nonzero(inter & vis[j]))
            if kept_j > kept_i:
                out[i, j] = 1.0
            elif kept_i > kept_j:
                out[j, i] = 1.0
    return out


def relation_loss(overlaps: np.ndarray, sym_gt: np.ndarray) -> tuple[float, Callable]:
    """Mean squared error between the symmetrized overlap matrix and the
    symmetric ground truth: ||O + O^T - R||_F^2 / n^2."""
    o = as_tensor(overlaps)
    r = as_tensor(sym_gt)
    if o.shape != r.shape or o.ndim != 2 or o.shape[0] != o.shape[1]:
        raise ConfigError(f"shape mismatch: overlaps {o.shape}, target {r.shape}")
    n = o.shape[0]
    resid = o + o.T - r
    loss = float((resid**2).sum()) / (n * n)

    def vjp(g: float = 1.0) -> np.ndarray:
        return (2.0 * float(g) / (n * n)) * (resid + resid.T)

    return loss, vjp


def weak_relation_loss(overlaps: np.ndarray, asym_gt: np.ndarray) -> tuple[float, Callable]:
    """Mean squared error directly against the asymmetric ground truth:
    ||O - R*||_F^2 / n^2."""
    o = as_tensor(overlaps)
    r = as_tensor(asym_gt)
    if o.shape != r.shape or o.ndim != 2 or o.shape[0] != o.shape[1]:
        raise ConfigError(f"shape mismatch: overlaps {o.shape}, target {r.shape}")
    n = o.shape[0]
    resid = o - r
    loss = float((resid**2).sum()) / (n * n)

    def vjp(g: float = 1.0) -> np.ndarray:
        return (2.0 * float(g) / (n * n)) * resid

    return loss, vjp


def overlap_accuracy(overlaps: np.ndarray, asym_gt: np.ndarray) -> float:
    """Fraction of ordered off-diagonal pairs whose thresholded overlap entry
    matches the asymmetric ground truth (threshold 0.5)."""
    o = as_tensor(overlaps)
    r = as_tensor(asym_gt)
    if o.shape != r.shape or o.ndim != 2 or o.shape[0] != o.shape[1]:
        raise ConfigError(f"shape mismatch: overlaps {o.shape}, target {r.shape}")
    n = o.shape[0]
    if n < 2:
        raise ConfigError("overlap accuracy undefined for fewer than 2 instances")
    off = ~np.eye(n, dtype=bool)
    positive = o >= DECISION_THRESHOLD
    tp = np.count_nonzero((r == 1.0) & positive & off)
    tn = np.count_nonzero((r == 0.0) & ~positive & off)
    return (tp + tn) / (n * (n - 1))


def filter_overlapping(sym_gt: np.ndarray) -> np.ndarray:
    """Indices of instances that significantly overlap any other instance."""
    r = as_tensor(sym_gt)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ConfigError(f"relation matrix must be square, got {r.shape}")
    return np.flatnonzero(r.any(axis=1))
