"""Float64 tensor plumbing: parameter store, SGD with Nesterov momentum,
finite-difference gradient checking, and bit-exact tensor serialization.

Tensors are plain C-contiguous ``numpy.ndarray`` values in float64. All
differentiable operations in this package follow one convention: the forward
function returns ``(output, vjp)`` where ``vjp`` maps an upstream cotangent
of the output's shape to cotangents of the differentiable inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DataFormatError, NumericError

MAGIC = b"SOGT"

# Parameters larger than this get a random coordinate subsample during
# finite-difference checking instead of an exhaustive sweep.
FD_SUBSAMPLE_THRESHOLD = 64

REL_ERR_FLOOR = 1e-8


def as_tensor(data, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def require_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# Parameter store


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    momentum: np.ndarray


class ParamStore:
    """Named parameters, each with a same-shape gradient accumulator and
    momentum buffer. Names are unique; insertion order is preserved."""

    def __init__(self) -> None:
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        v = as_tensor(value)
        self._entries[name] = ParamEntry(v, np.zeros_like(v), np.zeros_like(v))
        return v

    def names(self) -> list[str]:
        return list(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def value(self, name: str) -> np.ndarray:
        return self.entry(name).value

    def grad(self, name: str) -> np.ndarray:
        return self.entry(name).grad

    def accumulate(self, name: str, g) -> None:
        entry = self.entry(name)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != entry.grad.shape:
            raise ConfigError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {entry.grad.shape}"
            )
        entry.grad += g

    def zero_grads(self) -> None:
        for entry in self._entries.values():
            entry.grad.fill(0.0)

    def scale_grads(self, factor: float) -> None:
        for entry in self._entries.values():
            entry.grad *= factor

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: e.value.copy() for name, e in self._entries.items()}


def sgd_step(
    store: ParamStore,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> ParamStore:
    """One SGD update with Nesterov momentum applied to every entry.

    Per entry, with g' = grad + weight_decay * value:
    momentum buffer v <- momentum * v + g'; value <- value - lr * (g' + momentum * v).
    Gradient accumulators are zeroed afterwards.
    """
    if lr < 0:
        raise ConfigError("lr must be >= 0")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError("momentum must be in [0, 1)")
    for name in store.names():
        entry = store.entry(name)
        if entry.grad.shape != entry.value.shape:
            raise ConfigError(f"shape mismatch for parameter {name!r}")
        g = entry.grad + weight_decay * entry.value
        entry.momentum *= momentum
        entry.momentum += g
        entry.value -= lr * (g + momentum * entry.momentum)
        entry.grad.fill(0.0)
    return store


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error of analytic vs central-difference
    gradients, plus an overall pass flag."""

    max_rel_err: dict[str, float]
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        if self.failures:
            return False
        return all(err <= self.tol for err in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def finite_diff_check(
    loss: Callable[[ParamStore], float],
    store: ParamStore,
    eps: float = 1e-3,
    tol: float = 1e-4,
    max_coords: int = FD_SUBSAMPLE_THRESHOLD,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Check analytic gradients against central differences.

    ``loss`` must return a scalar and, as a side effect of evaluation,
    accumulate analytic gradients into ``store`` (gradients are zeroed before
    the reference call). Each parameter is probed coordinate-wise, or on a
    random subsample of ``max_coords`` coordinates when larger. The relative
    error denominator is max(|analytic|, |numeric|, 1e-8). Parameter values
    are restored exactly; the analytic gradients are left in place.
    """
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    if rng is None:
        rng = np.random.default_rng(0)

    store.zero_grads()
    base = float(loss(store))
    if not np.isfinite(base):
        return GradCheckReport({}, tol, [f"non-finite loss {base} at base point"])
    analytic = {name: store.grad(name).copy() for name in store.names()}

    max_err: dict[str, float] = {}
    failures: list[str] = []
    for name in store.names():
        value = store.value(name)
        flat = value.reshape(-1)
        size = flat.size
        if size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        else:
            coords = np.arange(size)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            saved = flat[c]
            flat[c] = saved + eps
            lp = float(loss(store))
            flat[c] = saved - eps
            lm = float(loss(store))
            flat[c] = saved
            if not (np.isfinite(lp) and np.isfinite(lm)):
                failures.append(f"{name}[{c}]: non-finite loss at probe point")
                continue
            numeric = (lp - lm) / (2.0 * eps)
            a = a_flat[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERR_FLOOR)
            worst = max(worst, rel)
        max_err[name] = worst

    # Leave the store holding the analytic gradients of the reference call.
    store.zero_grads()
    for name, g in analytic.items():
        store.accumulate(name, g)
    return GradCheckReport(max_err, tol, failures)


# ---------------------------------------------------------------------------
# Serialization ("SOGT": magic, u32 LE rank, u32 LE extents, f64 LE data)


def write_tensor(path, t) -> None:
    """Write a tensor in the SOGT binary format (bit-exact round trip)."""
    arr = as_tensor(t)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f8", copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def tensor_to_bytes(t) -> bytes:
    arr = as_tensor(t)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8", copy=False).tobytes(order="C")


def tensor_from_bytes(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise DataFormatError(f"{source}: bad magic at offset 0 (expected {MAGIC!r})")
    if len(blob) < 8:
        raise DataFormatError(f"{source}: truncated header at offset {len(blob)}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    extents_end = 8 + 4 * rank
    if len(blob) < extents_end:
        raise DataFormatError(f"{source}: truncated extents at offset {len(blob)}")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    if any(e == 0 for e in shape):
        raise DataFormatError(f"{source}: zero extent in shape {shape} at offset 8")
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = extents_end + 8 * count
    if len(blob) != expected:
        raise DataFormatError(
            f"{source}: expected {expected} bytes, got {len(blob)} "
            f"(data truncated at offset {min(len(blob), expected)})"
        )
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=extents_end)
    return data.astype(np.float64).reshape(shape)


def read_tensor(path) -> np.ndarray:
    """Read a SOGT tensor; raises :class:`DataFormatError` naming the offset
    for bad magic or truncation."""
    return tensor_from_bytes(Path(path).read_bytes(), source=str(path))


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write multiple named tensors as individual SOGT files under a prefix."""
    base = Path(path)
    base.mkdir(parents=True, exist_ok=True)
    for name, t in tensors.items():
        write_tensor(base / f"{name}.sogt", t)


def stable_rng(seed: int, *stream: int) -> np.random.Generator:
    """Portable, splittable RNG: Philox keyed by (seed, stream ids).

    Every random draw in the package flows through this so that datasets and
    training runs are reproducible across platforms and job counts.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def sigmoid(x) -> np.ndarray:
    """Numerically stable logistic function (no overflow for any float64)."""
    x = np.asarray(x, dtype=np.float64)
    # exp stays finite below ~709.8; the clip changes nothing within range.
    return 1.0 / (1.0 + np.exp(np.clip(-x, -709.0, 709.0)))
