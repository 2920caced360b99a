"""Detection evaluation: greedy matching, average precision, and
mined-pool true-positive accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, ScoredBox, iou
from .offline import CandidatePool

__all__ = [
    "MatchResult",
    "APReport",
    "match_detections",
    "average_precision",
    "evaluate_detections",
    "pool_tp_count",
    "COCO_THRESHOLDS",
]

GTBox = tuple[Box, int]

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class MatchResult:
    """Outcome for one detection at a given IoU threshold."""

    det_index: int
    gt_index: int | None
    is_tp: bool


def match_detections(
    dets: Sequence[ScoredBox],
    gts: Sequence[GTBox],
    iou_threshold: float,
) -> list[MatchResult]:
    """Greedy score-ordered matching within one image.

    Each detection, visited in descending score order, claims the
    highest-IoU unmatched same-class ground truth with IoU >= threshold;
    every ground truth is matched at most once.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken: set[int] = set()
    results: dict[int, MatchResult] = {}
    for i in order:
        det = dets[i]
        best_j = None
        best_iou = 0.0
        for j, (gt_box, gt_label) in enumerate(gts):
            if j in taken or gt_label != det.label:
                continue
            ov = iou(det.box, gt_box)
            if ov >= iou_threshold and ov > best_iou:
                best_iou = ov
                best_j = j
        if best_j is None:
            results[i] = MatchResult(det_index=i, gt_index=None, is_tp=False)
        else:
            taken.add(best_j)
            results[i] = MatchResult(det_index=i, gt_index=best_j, is_tp=True)
    return [results[i] for i in range(len(dets))]


def average_precision(
    tp_flags: Sequence[bool],
    n_gt: int,
    eleven_point: bool = False,
) -> float | None:
    """Area under the precision envelope, from rank-ordered TP flags.

    ``tp_flags`` must already be in descending-score order.  Returns None
    when there is nothing to evaluate (no ground truth and no
    detections); zero ground truth with detections scores 0.
    """
    if n_gt < 0:
        raise ValueError(f"n_gt must be >= 0, got {n_gt}")
    if n_gt == 0:
        return None if not tp_flags else 0.0
    if not tp_flags:
        return 0.0
    flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    recall = tp / n_gt
    # Precision envelope: best precision achievable at or beyond each rank.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if eleven_point:
        levels = np.linspace(0.0, 1.0, 11)
        vals = [envelope[recall >= r].max() if np.any(recall >= r) else 0.0 for r in levels]
        return float(np.mean(vals))
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(flags)):
        if flags[k]:
            ap += (recall[k] - prev_recall) * envelope[k]
            prev_recall = recall[k]
    return float(ap)


@dataclass(frozen=True)
class APReport:
    """Per-class AP values at each IoU threshold plus the novel-class means."""

    per_threshold: dict[float, dict[int, float | None]]
    novel_classes: tuple[int, ...]
    nap50: float
    nap: float
    n_gt_per_class: dict[int, int] = field(default_factory=dict)

    def ap50(self, class_id: int) -> float | None:
        return self.per_threshold[0.5][class_id]

    def to_json(self) -> str:
        payload = {
            "novel_classes": list(self.novel_classes),
            "nap50": self.nap50,
            "nap": self.nap,
            "per_threshold": {
                repr(thr): {str(c): ap for c, ap in entries.items()}
                for thr, entries in sorted(self.per_threshold.items())
            },
            "n_gt_per_class": {str(c): n for c, n in sorted(self.n_gt_per_class.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'class':>8} {'n_gt':>6} {'AP50':>8} {'AP':>8}"]
        classes = sorted(self.per_threshold[0.5])
        for c in classes:
            ap50 = self.per_threshold[0.5][c]
            aps = [self.per_threshold[t][c] for t in self.per_threshold]
            known = [a for a in aps if a is not None]
            mean_ap = sum(known) / len(known) if known else None
            lines.append(
                f"{c:>8} {self.n_gt_per_class.get(c, 0):>6} "
                f"{_fmt(ap50):>8} {_fmt(mean_ap):>8}"
            )
        lines.append(f"novel mean: nAP50={self.nap50:.4f} nAP={self.nap:.4f}")
        return "\n".join(lines)


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.4f}"


def _ranked_flags(
    dets_by_image: Mapping[int, Sequence[ScoredBox]],
    gts_by_image: Mapping[int, Sequence[GTBox]],
    class_id: int,
    threshold: float,
) -> tuple[list[bool], int]:
    entries: list[tuple[float, int, int, bool]] = []
    n_gt = 0
    for image_id in sorted(gts_by_image):
        n_gt += sum(1 for _, label in gts_by_image[image_id] if label == class_id)
    for image_id in sorted(dets_by_image):
        dets = [d for d in dets_by_image[image_id] if d.label == class_id]
        gts = list(gts_by_image.get(image_id, ()))
        matches = match_detections(dets, gts, threshold)
        for k, det in enumerate(dets):
            entries.append((-det.score, image_id, k, matches[k].is_tp))
    entries.sort()
    return [flag for *_rank, flag in entries], n_gt


def evaluate_detections(
    dets_by_image: Mapping[int, Sequence[ScoredBox]],
    gts_by_image: Mapping[int, Sequence[GTBox]],
    novel_classes: Sequence[int],
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    eleven_point: bool = False,
) -> APReport:
    """Score detections against ground truth and average AP over the novel
    classes; classes with no ground truth and no detections are excluded
    from the means."""
    classes = sorted(set(novel_classes))
    per_threshold: dict[float, dict[int, float | None]] = {}
    n_gt_per_class: dict[int, int] = {}
    for thr in iou_thresholds:
        row: dict[int, float | None] = {}
        for c in classes:
            flags, n_gt = _ranked_flags(dets_by_image, gts_by_image, c, thr)
            n_gt_per_class[c] = n_gt
            row[c] = average_precision(flags, n_gt, eleven_point=eleven_point)
        per_threshold[thr] = row
    nap50 = _mean_ap(per_threshold.get(0.5, {}))
    all_vals = [ap for row in per_threshold.values() for ap in row.values() if ap is not None]
    nap = float(np.mean(all_vals)) if all_vals else 0.0
    return APReport(
        per_threshold=per_threshold,
        novel_classes=tuple(classes),
        nap50=nap50,
        nap=nap,
        n_gt_per_class=n_gt_per_class,
    )


def _mean_ap(row: Mapping[int, float | None]) -> float:
    known = [ap for ap in row.values() if ap is not None]
    return float(np.mean(known)) if known else 0.0


def pool_tp_count(
    pool: CandidatePool,
    gts_by_image: Mapping[int, Sequence[GTBox]],
    iou_threshold: float = 0.5,
) -> dict[int, tuple[int, int]]:
    """Count, per class, how many pool instances overlap a same-class
    ground truth at IoU >= threshold (TP) versus not (FP).

    The oracle ground truth must include unannotated (implicit)
    instances.
    """
    counts: dict[int, tuple[int, int]] = {}
    for class_id in pool.classes:
        tp = fp = 0
        for inst in pool.instances[class_id]:
            gts = gts_by_image.get(inst.image_id, ())
            hit = any(
                label == class_id and iou(inst.box, gt_box) >= iou_threshold
                for gt_box, label in gts
            )
            if hit:
                tp += 1
            else:
                fp += 1
        counts[class_id] = (tp, fp)
    return counts
