"""Synthetic occlusion scenes standing in for detector and semantic-head
outputs.

Each scene places overlapping rectangle/ellipse instances with a known depth
ordering, derives disjoint visible masks from the overlapping amodal ones,
lays stuff classes out as horizontal bands, and synthesizes noisy box-local
mask logits plus image-scale semantic logits. Depth ordering is drawn from a
noisy key built from category and size, so who-covers-whom is (mostly)
predictable from instance features; detection scores are deliberately a poor
depth proxy.

Combined class-id layout everywhere: thing classes 0..n_thing-1, stuff
classes n_thing..n_thing+n_stuff-1. Panoptic channel layout: instances
0..N-1 in scene order, then stuff classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .metrics import PanopticMap, SegmentInfo
from .relembed import PATCH_SIZE, resize_mask_patch
from .tensorcore import stable_rng

# RNG sub-stream tags; every draw is keyed by (seed, stream).
STREAM_SCENE = 0
STREAM_LOGITS = 1
STREAM_DETECT = 2

# Weight of box-area (vs category) in the depth-ordering key: smaller
# instances tend to sit on top, the way a tie sits on a person.
SIZE_DEPTH_WEIGHT = 1.2

# Scale of the rank-percentile term inside the detection score noise.
SCORE_RANK_SCALE = 1.0

MIN_SCORE = 0.01


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for the synthetic world. Defaults are the standard desk-scale
    evaluation setting."""

    height: int = 64
    width: int = 64
    n_thing_classes: int = 4
    n_stuff_classes: int = 3
    min_instances: int = 2
    max_instances: int = 6
    # Draw weights over the instance-count range; crowded scenes dominate so
    # per-pair relation gradients (which scale as 1/count^2) stay tame.
    count_weights: tuple[float, ...] | None = (0.02, 0.03, 0.05, 0.30, 0.60)
    classes_per_scene: int = 2
    shape_kinds: tuple[str, ...] = ("rect", "ellipse")
    min_size_frac: float = 0.4
    max_size_frac: float = 0.65
    overlap_bias: float = 0.85
    logit_amplitude: float = 8.0
    sem_amplitude: float = 0.3
    logit_noise: float = 0.5
    depth_noise: float = 0.03
    box_jitter: float = 0.05
    class_flip_prob: float = 0.02
    score_noise: float = 0.15

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ConfigError("scene must be at least 32 x 32")
        if self.n_thing_classes < 1 or self.n_stuff_classes < 1:
            raise ConfigError("need at least one thing and one stuff class")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("instance count range must satisfy 1 <= min <= max")
        if self.count_weights is not None:
            span = self.max_instances - self.min_instances + 1
            if len(self.count_weights) != span:
                raise ConfigError(f"count_weights needs {span} entries")
            if any(w < 0 for w in self.count_weights) or sum(self.count_weights) <= 0:
                raise ConfigError("count_weights must be nonnegative and sum > 0")
        if not 1 <= self.classes_per_scene <= self.n_thing_classes:
            raise ConfigError("classes_per_scene must lie in [1, n_thing_classes]")
        if not self.shape_kinds or any(k not in ("rect", "ellipse") for k in self.shape_kinds):
            raise ConfigError(f"unknown shape kinds in {self.shape_kinds}")
        if not 0.0 < self.min_size_frac <= self.max_size_frac:
            raise ConfigError("size fractions must satisfy 0 < min <= max")
        if not 0.0 <= self.overlap_bias <= 1.0:
            raise ConfigError("overlap bias must lie in [0, 1]")
        if self.logit_noise < 0 or self.depth_noise < 0 or self.score_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.logit_amplitude <= 0 or self.sem_amplitude <= 0:
            raise ConfigError("logit amplitudes must be > 0")
        side = min(self.height, self.width)
        if self.min_size_frac * side < 2.0:
            raise ConfigError("size range cannot fit: smallest shape under 2 px")
        if self.max_size_frac * side > side - 4.0:
            raise ConfigError("size range cannot fit: largest shape exceeds the image")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_kinds"] = list(self.shape_kinds)
        if self.count_weights is not None:
            d["count_weights"] = list(self.count_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "shape_kinds" in d:
            d["shape_kinds"] = tuple(d["shape_kinds"])
        if d.get("count_weights") is not None:
            d["count_weights"] = tuple(d["count_weights"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad scene config: {exc}") from exc


@dataclass
class Instance:
    """One thing instance: full (amodal) shape, unoccluded (visible) part,
    tight box, class, depth rank (smaller = nearer), and a score."""

    box: np.ndarray
    class_id: int
    amodal: np.ndarray
    visible: np.ndarray
    depth_rank: int
    score: float = 1.0


@dataclass
class Scene:
    height: int
    width: int
    n_thing_classes: int
    n_stuff_classes: int
    instances: list[Instance]
    stuff_map: np.ndarray
    sem_map: np.ndarray
    id_map: np.ndarray

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    def boxes(self) -> np.ndarray:
        return np.array([inst.box for inst in self.instances], dtype=np.float64).reshape(-1, 4)

    def categories(self) -> np.ndarray:
        return np.array([inst.class_id for inst in self.instances], dtype=np.int64)

    def cat_onehot(self) -> np.ndarray:
        return one_hot(self.categories(), self.n_thing_classes)

    def amodal_stack(self) -> list[np.ndarray]:
        return [inst.amodal for inst in self.instances]

    def visible_stack(self) -> list[np.ndarray]:
        return [inst.visible for inst in self.instances]

    def mask_patches(self) -> np.ndarray:
        """Amodal masks resampled into their boxes, flattened: N x 784."""
        if not self.instances:
            return np.zeros((0, PATCH_SIZE * PATCH_SIZE))
        return np.stack(
            [resize_mask_patch(inst.amodal, inst.box) for inst in self.instances]
        )


@dataclass
class LogitPack:
    """Synthetic stand-ins for detector outputs: box-local mask logits
    (N x 28 x 28) and image-scale semantic logits (H x W x C_all)."""

    patch_logits: np.ndarray
    sem_logits: np.ndarray


@dataclass
class DetectedInstance:
    box: np.ndarray
    class_id: int
    score: float
    patch_logits: np.ndarray

    def onehot(self, n_classes: int) -> np.ndarray:
        return one_hot(np.array([self.class_id]), n_classes)[0]


def one_hot(ids: np.ndarray, n_classes: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
        raise ConfigError(f"class ids outside [0, {n_classes})")
    return (ids[:, None] == np.arange(n_classes)[None, :]).astype(np.float64)


def derive_visible(
    amodal: Sequence[np.ndarray], ranks: Sequence[int]
) -> list[np.ndarray]:
    """Visible masks from amodal masks and depth ranks: each instance keeps
    the amodal pixels not claimed by any strictly nearer instance."""
    ranks = [int(r) for r in ranks]
    if len(set(ranks)) != len(ranks):
        raise ConfigError("depth ranks must be distinct")
    masks = [np.asarray(m, dtype=bool) for m in amodal]
    if len(masks) != len(ranks):
        raise ConfigError("one rank per mask required")
    visible: list[np.ndarray | None] = [None] * len(masks)
    claimed: np.ndarray | None = None
    for idx in sorted(range(len(masks)), key=lambda i: ranks[i]):
        if claimed is None:
            visible[idx] = masks[idx].copy()
            claimed = masks[idx].copy()
        else:
            visible[idx] = masks[idx] & ~claimed
            claimed |= masks[idx]
    return [v for v in visible]  # type: ignore[misc]


def _shape_mask(kind: str, cy: float, cx: float, hh: float, hw: float,
                height: int, width: int) -> np.ndarray:
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    if kind == "rect":
        return (np.abs(cols - cx) <= hw) & (np.abs(rows - cy) <= hh)
    if kind == "ellipse":
        return ((cols - cx) / hw) ** 2 + ((rows - cy) / hh) ** 2 <= 1.0
    raise ConfigError(f"unknown shape kind {kind!r}")


def _tight_box(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x, y = float(cols[0]), float(rows[0])
    return np.array([x, y, float(cols[-1]) - x + 1.0, float(rows[-1]) - y + 1.0])


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministic scene synthesis from (config, seed).

    Depth ranks are the ascending order of a noisy key combining the class
    id and the box-area fraction, so nearer instances tend to be the smaller
    and lower-class ones.
    """
    config.validate()
    rng = stable_rng(seed, STREAM_SCENE)
    h, w = config.height, config.width
    if config.count_weights is None:
        n = int(rng.integers(config.min_instances, config.max_instances + 1))
    else:
        weights = np.asarray(config.count_weights, dtype=np.float64)
        counts = np.arange(config.min_instances, config.max_instances + 1)
        n = int(rng.choice(counts, p=weights / weights.sum()))

    anchor_x = rng.uniform(0.3 * w, 0.7 * w)
    anchor_y = rng.uniform(0.3 * h, 0.7 * h)

    kinds: list[str] = []
    centers = np.zeros((n, 2))
    halves = np.zeros((n, 2))
    for i in range(n):
        kinds.append(config.shape_kinds[int(rng.integers(len(config.shape_kinds)))])
        hw_ = 0.5 * rng.uniform(config.min_size_frac, config.max_size_frac) * w
        hh_ = 0.5 * rng.uniform(config.min_size_frac, config.max_size_frac) * h
        ux = rng.uniform(hw_ + 1.0, w - 2.0 - hw_)
        uy = rng.uniform(hh_ + 1.0, h - 2.0 - hh_)
        cx = config.overlap_bias * anchor_x + (1.0 - config.overlap_bias) * ux
        cy = config.overlap_bias * anchor_y + (1.0 - config.overlap_bias) * uy
        cx = float(np.clip(cx, hw_ + 1.0, w - 2.0 - hw_))
        cy = float(np.clip(cy, hh_ + 1.0, h - 2.0 - hh_))
        centers[i] = (cy, cx)
        halves[i] = (hh_, hw_)

    # Each scene draws its classes from a contiguous pool: same-class and
    # near-class occlusions are the common case, as in real scenes.
    pool_lo = int(rng.integers(0, config.n_thing_classes - config.classes_per_scene + 1))
    classes = pool_lo + rng.integers(0, config.classes_per_scene, size=n)
    area_frac = (2.0 * halves[:, 0]) * (2.0 * halves[:, 1]) / (h * w)
    keys = (
        classes / config.n_thing_classes
        + SIZE_DEPTH_WEIGHT * area_frac
        + config.depth_noise * rng.standard_normal(n)
    )
    order = np.argsort(keys, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)

    amodal = [
        _shape_mask(kinds[i], centers[i, 0], centers[i, 1], halves[i, 0], halves[i, 1], h, w)
        for i in range(n)
    ]
    if any(not m.any() for m in amodal):
        raise ConfigError("size range cannot fit: generated an empty shape")
    visible = derive_visible(amodal, ranks.tolist())

    stuff_map = np.broadcast_to(
        (np.arange(h, dtype=np.int64)[:, None] * config.n_stuff_classes) // h, (h, w)
    ).copy()
    sem_map = config.n_thing_classes + stuff_map
    id_map = n + stuff_map
    instances = []
    for i in range(n):
        sem_map = np.where(visible[i], classes[i], sem_map)
        id_map = np.where(visible[i], i, id_map)
        instances.append(
            Instance(
                box=_tight_box(amodal[i]),
                class_id=int(classes[i]),
                amodal=amodal[i],
                visible=visible[i],
                depth_rank=int(ranks[i]),
                score=1.0,
            )
        )
    return Scene(
        height=h,
        width=w,
        n_thing_classes=config.n_thing_classes,
        n_stuff_classes=config.n_stuff_classes,
        instances=instances,
        stuff_map=stuff_map,
        sem_map=sem_map.astype(np.int32),
        id_map=id_map.astype(np.int32),
    )


def _patch_from_mask(mask: np.ndarray, box: np.ndarray, amplitude: float) -> np.ndarray:
    m = resize_mask_patch(mask, box).reshape(PATCH_SIZE, PATCH_SIZE)
    return amplitude * (2.0 * m - 1.0)


def synth_logits(scene: Scene, config: SceneConfig, seed: int) -> LogitPack:
    """Noisy logits from ground truth: patch logit amplitude +-alpha around
    the resampled amodal mask, semantic logits around the class-id map."""
    rng = stable_rng(seed, STREAM_LOGITS)
    n = scene.n_instances
    alpha = config.logit_amplitude
    patches = np.zeros((n, PATCH_SIZE, PATCH_SIZE))
    for i, inst in enumerate(scene.instances):
        patches[i] = _patch_from_mask(inst.amodal, inst.box, alpha)
        patches[i] += config.logit_noise * rng.standard_normal((PATCH_SIZE, PATCH_SIZE))
    c_all = scene.n_thing_classes + scene.n_stuff_classes
    onehot = (scene.sem_map[:, :, None] == np.arange(c_all)[None, None, :]).astype(np.float64)
    # Semantic logits are weaker than mask logits, the way a trained semantic
    # head is less certain than box-conditioned masks; the panoptic head's k
    # factor exists to balance exactly this numerical difference.
    sem = config.sem_amplitude * (2.0 * onehot - 1.0)
    sem += config.logit_noise * rng.standard_normal(sem.shape)
    return LogitPack(patch_logits=patches, sem_logits=sem)


def perturb_detections(
    scene: Scene, config: SceneConfig, seed: int
) -> list[DetectedInstance]:
    """Detector-like instances: jittered boxes, occasional class flips, and
    scores that only loosely follow depth order.

    Scores are clamp(1 - score_noise * (rank_percentile + gauss), 0.01, 1],
    so with zero noise every score is exactly 1, and the chance that a pair's
    score order contradicts its depth order is governed by the percentile
    gap (see :func:`expected_score_contradiction`).
    """
    rng = stable_rng(seed, STREAM_DETECT)
    n = scene.n_instances
    out: list[DetectedInstance] = []
    for inst in scene.instances:
        x, y, bw, bh = inst.box
        j = config.box_jitter
        u = rng.uniform(-1.0, 1.0, size=4)
        bw2 = max(bw * (1.0 + u[2] * j), 1.0)
        bh2 = max(bh * (1.0 + u[3] * j), 1.0)
        x2 = float(np.clip(x + u[0] * j * bw, -(bw2 - 1.0), scene.width - 1.0))
        y2 = float(np.clip(y + u[1] * j * bh, -(bh2 - 1.0), scene.height - 1.0))
        box = np.array([x2, y2, bw2, bh2])

        cls = inst.class_id
        flip = rng.uniform()
        if config.n_thing_classes > 1:
            alt = int((cls + 1 + rng.integers(config.n_thing_classes - 1)) % config.n_thing_classes)
            if flip < config.class_flip_prob:
                cls = alt

        pct = inst.depth_rank / max(n - 1, 1)
        noise = config.score_noise * (SCORE_RANK_SCALE * pct + rng.standard_normal())
        score = float(np.clip(1.0 - noise, MIN_SCORE, 1.0))

        patch = _patch_from_mask(inst.amodal, box, config.logit_amplitude)
        patch = patch + config.logit_noise * rng.standard_normal(patch.shape)
        out.append(DetectedInstance(box=box, class_id=cls, score=score, patch_logits=patch))
    return out


def expected_score_contradiction(instance_counts: Sequence[int]) -> float:
    """Analytic expected fraction of ordered pairs whose score order
    contradicts depth order, under the documented score model (clamping
    ignored): for percentile gap g the probability is Phi(-g / sqrt(2))."""
    total = 0.0
    pairs = 0
    for n in instance_counts:
        if n < 2:
            continue
        for d in range(1, n):
            g = SCORE_RANK_SCALE * d / (n - 1)
            # P(eps_i - eps_j > g) with eps ~ N(0,1): Phi(-g/sqrt(2)).
            p = 0.5 * (1.0 + math.erf(-g / 2.0))
            total += p * (n - d)  # (n - d) ordered pairs share gap d
            pairs += n - d
    return total / pairs if pairs else 0.0


def gt_panoptic_map(scene: Scene) -> PanopticMap:
    """Ground-truth panoptic map: one segment per visibly present instance,
    one per stuff class region; no void."""
    n = scene.n_instances
    ids = np.zeros((scene.height, scene.width), dtype=np.int32)
    segments: dict[int, SegmentInfo] = {}
    for i, inst in enumerate(scene.instances):
        if inst.visible.any():
            ids[inst.visible] = i + 1
            segments[i + 1] = SegmentInfo(category=inst.class_id, isthing=True)
    for s in range(scene.n_stuff_classes):
        region = scene.id_map == n + s
        if region.any():
            ids[region] = n + 1 + s
            segments[n + 1 + s] = SegmentInfo(
                category=scene.n_thing_classes + s, isthing=False
            )
    return PanopticMap(ids=ids, segments=segments)
