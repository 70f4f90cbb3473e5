"""Panoptic Quality with category-aware IoU > 0.5 matching.

A panoptic map is an integer segment-id image plus a table describing each
segment's category and thing/stuff flag; id 0 is reserved for void. Matching
follows the metric's standard rules: ground-truth void pixels are excluded
from IoU denominators, and unmatched predictions mostly covering ground-truth
void are not penalized as false positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

VOID_SEGMENT = 0

MATCH_IOU = 0.5


@dataclass(frozen=True)
class SegmentInfo:
    category: int
    isthing: bool


@dataclass
class PanopticMap:
    """H x W segment ids (0 = void) plus per-segment category info."""

    ids: np.ndarray
    segments: dict[int, SegmentInfo]

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids)
        if self.ids.ndim != 2:
            raise ConfigError(f"segment-id map must be 2-d, got {self.ids.shape}")
        present = set(np.unique(self.ids).tolist()) - {VOID_SEGMENT}
        missing = present - set(self.segments)
        if missing:
            raise ConfigError(f"segment ids missing from the table: {sorted(missing)}")


@dataclass
class CategoryTally:
    isthing: bool
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0

    @property
    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / denom if denom else 0.0

    @property
    def counted(self) -> bool:
        return (self.tp + self.fp + self.fn) > 0


@dataclass
class PQReport:
    """Per-category tallies plus class-averaged aggregates.

    Aggregates are unweighted means over categories with any tally;
    categories absent from both maps do not enter the average.
    """

    categories: dict[int, CategoryTally] = field(default_factory=dict)

    def tally(self, category: int, isthing: bool) -> CategoryTally:
        entry = self.categories.get(category)
        if entry is None:
            entry = self.categories[category] = CategoryTally(isthing=isthing)
        return entry

    def _mean(self, attr: str, isthing: bool | None) -> float:
        vals = [
            getattr(t, attr)
            for t in self.categories.values()
            if t.counted and (isthing is None or t.isthing == isthing)
        ]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def pq(self) -> float:
        return self._mean("pq", None)

    @property
    def sq(self) -> float:
        return self._mean("sq", None)

    @property
    def rq(self) -> float:
        return self._mean("rq", None)

    @property
    def pq_things(self) -> float:
        return self._mean("pq", True)

    @property
    def pq_stuff(self) -> float:
        return self._mean("pq", False)

    @staticmethod
    def merge(reports: list["PQReport"]) -> "PQReport":
        out = PQReport()
        for rep in reports:
            for cat, t in rep.categories.items():
                acc = out.tally(cat, t.isthing)
                acc.iou_sum += t.iou_sum
                acc.tp += t.tp
                acc.fp += t.fp
                acc.fn += t.fn
        return out

    def to_dict(self) -> dict:
        return {
            "pq": self.pq,
            "sq": self.sq,
            "rq": self.rq,
            "pq_things": self.pq_things,
            "pq_stuff": self.pq_stuff,
            "categories": {
                str(cat): {
                    "isthing": t.isthing,
                    "iou_sum": t.iou_sum,
                    "tp": t.tp,
                    "fp": t.fp,
                    "fn": t.fn,
                    "pq": t.pq,
                    "sq": t.sq,
                    "rq": t.rq,
                }
                for cat, t in sorted(self.categories.items())
            },
        }


def _areas(ids: np.ndarray) -> dict[int, int]:
    values, counts = np.unique(ids, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}


def panoptic_quality(pred: PanopticMap, gt: PanopticMap) -> PQReport:
    """Compare one predicted and one ground-truth panoptic map.

    Segments match iff they share a category and IoU > 0.5; since IoU > 0.5
    admits at most one partner per segment, matching needs no assignment
    step. Unmatched ground truth counts as FN; unmatched predictions count
    as FP unless more than half their area lies on ground-truth void.
    """
    if pred.ids.shape != gt.ids.shape:
        raise ConfigError(f"map shapes differ: {pred.ids.shape} vs {gt.ids.shape}")
    report = PQReport()
    pred_areas = _areas(pred.ids)
    gt_areas = _areas(gt.ids)

    # Joint histogram of (pred segment, gt segment) pixel pairs.
    offset = int(gt.ids.max()) + 2
    combined = pred.ids.astype(np.int64) * offset + gt.ids.astype(np.int64)
    values, counts = np.unique(combined, return_counts=True)
    inter: dict[tuple[int, int], int] = {}
    for v, c in zip(values.tolist(), counts.tolist()):
        inter[(v // offset, v % offset)] = int(c)

    pred_void_overlap = {
        pid: inter.get((pid, VOID_SEGMENT), 0) for pid in pred_areas if pid != VOID_SEGMENT
    }

    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    for (pid, gid), i in inter.items():
        if pid == VOID_SEGMENT or gid == VOID_SEGMENT:
            continue
        p_info = pred.segments[pid]
        g_info = gt.segments[gid]
        if p_info.category != g_info.category:
            continue
        union = (
            pred_areas[pid] + gt_areas[gid] - i - pred_void_overlap.get(pid, 0)
        )
        iou = i / union if union > 0 else 0.0
        if iou > MATCH_IOU:
            t = report.tally(g_info.category, g_info.isthing)
            t.tp += 1
            t.iou_sum += iou
            matched_pred.add(pid)
            matched_gt.add(gid)

    for gid, info in gt.segments.items():
        if gid in matched_gt or gt_areas.get(gid, 0) == 0:
            continue
        report.tally(info.category, info.isthing).fn += 1

    for pid, info in pred.segments.items():
        area = pred_areas.get(pid, 0)
        if pid in matched_pred or area == 0:
            continue
        if pred_void_overlap.get(pid, 0) > 0.5 * area:
            continue
        report.tally(info.category, info.isthing).fp += 1

    return report
