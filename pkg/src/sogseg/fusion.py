"""Inference-time fusion pipelines producing panoptic maps.

Three routes share the detection preprocessing: a score-sorted greedy paint
(the classic heuristic), the same paint with hand-written class-pair priors
overriding score order on contested pixels, and the full pipeline that embeds
detections, predicts the overlap relation matrix, resolves logits, and lets
the panoptic head classify each pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import panohead, relembed, resolver
from .errors import ConfigError
from .metrics import PanopticMap, SegmentInfo
from .scenegen import DetectedInstance, one_hot
from .tensorcore import as_tensor


@dataclass(frozen=True)
class FusionConfig:
    """Inference knobs. ``min_stuff_area`` is the desk-scale default for
    64 x 64 scenes; full-scale systems conventionally use 4096."""

    min_score: float = 0.5
    overlap_threshold: float = 0.5
    min_stuff_area: int = 16
    priors: tuple[tuple[int, int], ...] = ()
    ph: int = 2
    k: float = 2.0

    def validate(self, n_classes: int | None = None) -> None:
        if not 0.0 < self.min_score < 1.0:
            raise ConfigError("min_score must lie in (0, 1)")
        if not 0.0 < self.overlap_threshold < 1.0:
            raise ConfigError("overlap_threshold must lie in (0, 1)")
        if self.min_stuff_area < 0:
            raise ConfigError("min_stuff_area must be >= 0")
        if self.ph not in (1, 2):
            raise ConfigError(f"unknown panoptic-head variant {self.ph}")
        if n_classes is not None:
            for above, below in self.priors:
                if not (0 <= above < n_classes and 0 <= below < n_classes):
                    raise ConfigError(f"prior ({above}, {below}) references unknown classes")


def default_priors(n_thing_classes: int) -> tuple[tuple[int, int], ...]:
    """Class-pair ordering matching the synthetic world's depth tendency:
    lower class ids tend to sit on top."""
    return tuple(
        (a, b)
        for a in range(n_thing_classes)
        for b in range(a + 1, n_thing_classes)
    )


def confidence_filter(dets: list[DetectedInstance], min_score: float) -> list[DetectedInstance]:
    """Keep detections scoring at least ``min_score``, order preserved."""
    return [d for d in dets if d.score >= min_score]


def binary_mask(det: DetectedInstance, height: int, width: int) -> np.ndarray:
    """Image-scale membership mask: sigmoid(pasted logit) >= 0.5."""
    pasted, _ = resolver.paste_patch(det.patch_logits, det.box, height, width)
    return pasted >= 0.0


def _score_order(dets: list[DetectedInstance]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def nms_like(
    dets: list[DetectedInstance],
    overlap_threshold: float,
    height: int,
    width: int,
) -> list[tuple[DetectedInstance, np.ndarray]]:
    """Greedy same-class suppression in descending score order.

    A candidate overlapping a kept same-class mask by more than the
    threshold (intersection over the smaller current mask) is discarded;
    otherwise it keeps only its non-intersecting part. Returns the surviving
    detections with their (possibly trimmed) masks.
    """
    kept: list[tuple[DetectedInstance, np.ndarray]] = []
    for i in _score_order(dets):
        det = dets[i]
        mask = binary_mask(det, height, width)
        area = int(mask.sum())
        discard = area == 0
        for other, other_mask in kept:
            if discard or other.class_id != det.class_id:
                continue
            inter = int(np.count_nonzero(mask & other_mask))
            if inter == 0:
                continue
            smaller = min(area, int(other_mask.sum()))
            if smaller == 0 or inter / smaller > overlap_threshold:
                discard = True
            else:
                mask &= ~other_mask
                area = int(mask.sum())
                if area == 0:
                    discard = True
        if not discard:
            kept.append((det, mask))
    return kept


def _paint(
    dets: list[DetectedInstance],
    height: int,
    width: int,
    priors: tuple[tuple[int, int], ...],
) -> np.ndarray:
    """Score-ordered greedy painting; priors (above, below) let a later
    instance steal contested pixels from classes it should cover."""
    owner = np.full((height, width), -1, dtype=np.int64)
    above = set(priors)
    for i in _score_order(dets):
        mask = binary_mask(dets[i], height, width)
        take = mask & (owner == -1)
        if above:
            contested = mask & (owner >= 0)
            for j in np.unique(owner[contested]):
                if (dets[i].class_id, dets[int(j)].class_id) in above:
                    take |= contested & (owner == j)
        owner[take] = i
    return owner


def _finish_map(
    owner: np.ndarray,
    dets: list[DetectedInstance],
    sem_logits: np.ndarray,
    n_thing: int,
    min_stuff_area: int,
) -> PanopticMap:
    """Assign stuff classes to unowned pixels, build the segment table, and
    void undersized stuff regions."""
    sem_logits = as_tensor(sem_logits)
    h, w, c_all = sem_logits.shape
    n_stuff = c_all - n_thing
    if n_stuff < 1:
        raise ConfigError("semantic logits carry no stuff channels")
    n = len(dets)
    ids = np.zeros((h, w), dtype=np.int32)
    segments: dict[int, SegmentInfo] = {}
    for i in range(n):
        region = owner == i
        if region.any():
            ids[region] = i + 1
            segments[i + 1] = SegmentInfo(category=dets[i].class_id, isthing=True)
    free = owner == -1
    if free.any():
        stuff_choice = np.argmax(sem_logits[:, :, n_thing:], axis=2)
        for s in range(n_stuff):
            region = free & (stuff_choice == s)
            count = int(region.sum())
            if count == 0:
                continue
            if count < min_stuff_area:
                continue  # leave as void
            ids[region] = n + 1 + s
            segments[n + 1 + s] = SegmentInfo(category=n_thing + s, isthing=False)
    return PanopticMap(ids=ids, segments=segments)


def heuristic_fuse(
    dets: list[DetectedInstance],
    sem_logits: np.ndarray,
    cfg: FusionConfig,
    n_thing: int,
) -> PanopticMap:
    """Score-sorted fusion: paint masks onto unclaimed pixels in descending
    score order, fill the rest with the stuff argmax, void small stuff."""
    h, w = np.asarray(sem_logits).shape[:2]
    owner = _paint(dets, h, w, priors=())
    return _finish_map(owner, dets, sem_logits, n_thing, cfg.min_stuff_area)


def prior_fuse(
    dets: list[DetectedInstance],
    sem_logits: np.ndarray,
    cfg: FusionConfig,
    n_thing: int,
) -> PanopticMap:
    """Heuristic fusion with label priors ruling contested pixels."""
    cfg.validate(n_classes=n_thing)
    h, w = np.asarray(sem_logits).shape[:2]
    owner = _paint(dets, h, w, priors=cfg.priors)
    return _finish_map(owner, dets, sem_logits, n_thing, cfg.min_stuff_area)


def sog_infer(
    dets: list[DetectedInstance],
    sem_logits: np.ndarray,
    model: relembed.EmbedModel,
    cfg: FusionConfig,
) -> PanopticMap:
    """Full inference: filter and suppress detections, embed the survivors,
    predict overlap relations, resolve the pasted logits, and classify every
    pixel in the panoptic head. Zero surviving detections yields a stuff-only
    map."""
    sem_logits = as_tensor(sem_logits)
    h, w, c_all = sem_logits.shape
    n_thing = model.dims.n_thing_classes
    if c_all <= n_thing:
        raise ConfigError(
            f"semantic logits have {c_all} channels but the model expects "
            f"more than {n_thing} (things + stuff)"
        )
    cfg.validate(n_classes=n_thing)
    survivors = [d for d, _ in nms_like(confidence_filter(dets, cfg.min_score),
                                        cfg.overlap_threshold, h, w)]
    n = len(survivors)
    if n == 0:
        return _finish_map(np.full((h, w), -1, dtype=np.int64), [], sem_logits,
                           n_thing, cfg.min_stuff_area)

    cats = one_hot(np.array([d.class_id for d in survivors]), n_thing)
    boxes = np.stack([d.box for d in survivors])
    patches = np.stack([d.patch_logits for d in survivors])
    masks = (patches >= 0.0).astype(np.float64).reshape(n, -1)
    overlaps, _ = relembed.overlap_from_features(model.store, cats, boxes, masks)

    stack, _ = resolver.paste_stack(patches, boxes, h, w)
    resolved, _ = resolver.resolve(stack, overlaps)

    inst_logits = np.empty_like(resolved)
    for i, det in enumerate(survivors):
        sem_i = panohead.extract_sem_logit(sem_logits, det.box, det.class_id)
        if cfg.ph == 1:
            inst_logits[:, :, i], _ = panohead.combine_ph1(sem_i, resolved[:, :, i])
        else:
            inst_logits[:, :, i], _ = panohead.combine_ph2(sem_i, resolved[:, :, i], cfg.k)
    panoptic, _ = panohead.assemble(inst_logits, sem_logits[:, :, n_thing:])
    channel = panohead.infer_ids(panoptic)

    owner = np.where(channel < n, channel, -1).astype(np.int64)
    return _finish_map(owner, survivors, sem_logits, n_thing, cfg.min_stuff_area)
