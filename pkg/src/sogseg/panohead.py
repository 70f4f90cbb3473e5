"""Combine semantic and resolved instance logits into per-pixel channel
classification: logit fusion (two variants), channel assembly, the panoptic
cross-entropy, and argmax inference."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import bilinear
from .errors import ConfigError
from .tensorcore import as_tensor, sigmoid

#: Reserved channel-id value for pixels excluded from the loss / unassigned.
VOID_ID = -1


def extract_sem_logit(sem_logits: np.ndarray, box, class_id: int) -> np.ndarray:
    """Semantic logit of one class inside its box, exactly zero outside."""
    sem_logits = as_tensor(sem_logits)
    if sem_logits.ndim != 3:
        raise ConfigError(f"semantic logits must be H x W x C, got {sem_logits.shape}")
    h, w, c = sem_logits.shape
    class_id = int(class_id)
    if not 0 <= class_id < c:
        raise ConfigError(f"class id {class_id} outside [0, {c})")
    x, y, bw, bh = (float(v) for v in box)
    c_lo, c_hi = bilinear.covered_range(x, bw, w)
    r_lo, r_hi = bilinear.covered_range(y, bh, h)
    out = np.zeros((h, w), dtype=np.float64)
    if c_hi > c_lo and r_hi > r_lo:
        out[r_lo:r_hi, c_lo:c_hi] = sem_logits[r_lo:r_hi, c_lo:c_hi, class_id]
    return out


def combine_ph1(sem: np.ndarray, inst: np.ndarray) -> tuple[np.ndarray, Callable]:
    """Additive fusion: Z = X + A'."""
    sem, inst = as_tensor(sem), as_tensor(inst)
    out = sem + inst

    def vjp(g: np.ndarray):
        g = np.asarray(g, dtype=np.float64)
        return g, g

    return out, vjp


def combine_ph2(sem: np.ndarray, inst: np.ndarray, k: float = 2.0) -> tuple[np.ndarray, Callable]:
    """Gated fusion: Z = k * X o s(A') + A'.

    The factor k balances semantic output values against mask logits.
    """
    sem, inst = as_tensor(sem), as_tensor(inst)
    s = sigmoid(inst)
    out = k * sem * s + inst

    def vjp(g: np.ndarray):
        g = np.asarray(g, dtype=np.float64)
        d_sem = g * (k * s)
        d_inst = g * (k * sem * s * (1.0 - s) + 1.0)
        return d_sem, d_inst

    return out, vjp


def assemble(inst_stack: np.ndarray, stuff_stack: np.ndarray) -> tuple[np.ndarray, Callable]:
    """Concatenate instance channels (first) and stuff channels (after)."""
    inst_stack, stuff_stack = as_tensor(inst_stack), as_tensor(stuff_stack)
    if inst_stack.ndim != 3 or stuff_stack.ndim != 3:
        raise ConfigError("channel stacks must be H x W x C")
    if inst_stack.shape[:2] != stuff_stack.shape[:2]:
        raise ConfigError(
            f"spatial shapes differ: {inst_stack.shape[:2]} vs {stuff_stack.shape[:2]}"
        )
    n = inst_stack.shape[2]
    out = np.concatenate([inst_stack, stuff_stack], axis=2)

    def vjp(g: np.ndarray):
        g = np.asarray(g, dtype=np.float64)
        return g[:, :, :n], g[:, :, n:]

    return out, vjp


def panoptic_ce_loss(logits: np.ndarray, gt_ids: np.ndarray) -> tuple[float, Callable]:
    """Mean cross entropy of per-pixel channel classification.

    Pixels labeled :data:`VOID_ID` are excluded from the mean; a map that is
    all void is an error. Returns (loss, vjp(g) -> d_logits).
    """
    logits = as_tensor(logits)
    gt = np.asarray(gt_ids)
    if logits.ndim != 3 or gt.shape != logits.shape[:2]:
        raise ConfigError(f"logits {logits.shape} and ids {gt.shape} do not line up")
    k = logits.shape[2]
    valid = gt != VOID_ID
    all_valid = bool(valid.all())
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ConfigError("cross entropy undefined: every pixel is void")
    if all_valid:
        z = logits.reshape(-1, k)
        labels = gt.reshape(-1).astype(np.int64)
    else:
        z = logits[valid]
        labels = gt[valid].astype(np.int64)
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"ground-truth ids outside [0, {k})")

    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1)
    rows = np.arange(n_valid)
    log_softmax_at_label = (z[rows, labels] - zmax[:, 0]) - np.log(denom)
    loss = -float(log_softmax_at_label.mean())

    def vjp(g: float = 1.0) -> np.ndarray:
        softmax = ez / denom[:, None]
        softmax[rows, labels] -= 1.0
        softmax *= float(g) / n_valid
        if all_valid:
            return softmax.reshape(logits.shape)
        d = np.zeros_like(logits)
        d[valid] = softmax
        return d

    return loss, vjp


def infer_ids(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels; ties break toward the lowest index."""
    logits = as_tensor(logits)
    if logits.ndim != 3 or logits.shape[2] == 0:
        raise ConfigError(f"logits must be H x W x C with C >= 1, got {logits.shape}")
    return np.argmax(logits, axis=2).astype(np.int32)
