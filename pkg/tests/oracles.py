"""Independent brute-force references used to check the production paths.

These deliberately reimplement the algorithms from their definitions
(full pairwise IoU matrices, exhaustive greedy scans) and share no code
with the package internals.
"""

from __future__ import annotations

import math

import numpy as np

from iminer.geometry import Box, ScoredBox


def iou_matrix(boxes_a: list[Box], boxes_b: list[Box]) -> np.ndarray:
    """All-pairs IoU from first principles via numpy broadcasting."""
    a = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes_a], dtype=np.float64).reshape(-1, 4)
    b = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes_b], dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms_reference(
    boxes: list[ScoredBox], iou_threshold: float, class_wise: bool = True
) -> list[ScoredBox]:
    """O(n^2) suppression: repeatedly take the best remaining box and mark
    everything it dominates."""
    n = len(boxes)
    if n == 0:
        return []
    overlaps = iou_matrix([b.box for b in boxes], [b.box for b in boxes])
    order = sorted(
        range(n),
        key=lambda i: (
            -boxes[i].score,
            -(boxes[i].iou_score if boxes[i].iou_score is not None else 0.0),
            i,
        ),
    )
    suppressed = [False] * n
    kept: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order:
            if suppressed[j] or j == i:
                continue
            if class_wise and boxes[j].label != boxes[i].label:
                continue
            if overlaps[i, j] > iou_threshold:
                suppressed[j] = True
    return [boxes[i] for i in kept]


def match_reference(
    dets: list[ScoredBox],
    gts: list[tuple[Box, int]],
    iou_threshold: float,
) -> list[bool]:
    """Greedy score-ordered matching recomputed from scratch; returns the
    TP flag per detection in original order."""
    flags = [False] * len(dets)
    if dets and gts:
        overlaps = iou_matrix([d.box for d in dets], [g[0] for g in gts])
    taken: set[int] = set()
    for i in sorted(range(len(dets)), key=lambda i: (-dets[i].score, i)):
        best, best_ov = None, 0.0
        for j, (gt_box, gt_label) in enumerate(gts):
            if j in taken or gt_label != dets[i].label:
                continue
            ov = overlaps[i, j]
            if ov >= iou_threshold and ov > best_ov:
                best, best_ov = j, ov
        if best is not None:
            taken.add(best)
            flags[i] = True
    return flags


def mean_std_threshold(scores: list[float], alpha: float) -> float:
    """Threshold recomputation with plain Python accumulation."""
    mean = math.fsum(scores) / len(scores)
    var = math.fsum((s - mean) ** 2 for s in scores) / len(scores)
    return mean + alpha * math.sqrt(var)


def random_box(rng: np.random.Generator, extent: float = 100.0) -> Box:
    w = rng.uniform(2.0, extent / 2)
    h = rng.uniform(2.0, extent / 2)
    x1 = rng.uniform(0.0, extent - w)
    y1 = rng.uniform(0.0, extent - h)
    return Box(x1, y1, x1 + w, y1 + h)


def random_scored_boxes(
    rng: np.random.Generator,
    n: int,
    n_labels: int = 3,
    with_iou: bool = False,
    extent: float = 100.0,
    quantize_scores: bool = False,
) -> list[ScoredBox]:
    out = []
    for _ in range(n):
        score = float(rng.random())
        if quantize_scores:
            score = round(score, 1)
        out.append(
            ScoredBox(
                box=random_box(rng, extent),
                score=score,
                label=int(rng.integers(0, n_labels)),
                iou_score=float(rng.random()) if with_iou and rng.random() < 0.5 else None,
            )
        )
    return out
