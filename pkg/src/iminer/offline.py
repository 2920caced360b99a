"""Offline candidate mining: detector inference, cosine calibration of
novel-class scores, and class-wise adaptive thresholding.

The flow mirrors the offline mechanism it implements: a detector runs
over the base images, a self-supervised discriminator rescores the
novel-class candidates via prototype cosine similarity, and a per-class
threshold of mean + alpha * std filters the pool, clamped to a maximum
count per class.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Collection, Mapping, Protocol, Sequence

import numpy as np

from .config import MiningConfig
from .features import ClassPrototype, FeatureMap, build_prototypes, cosine_scores, roi_pool
from .geometry import Box, ScoredBox, nms
from .parallel import ordered_map

__all__ = [
    "Provenance",
    "CandidateInstance",
    "ClassStats",
    "CandidatePool",
    "ProposalScore",
    "DetectorInterface",
    "MissingPrototypeError",
    "geometric_mean_score",
    "detect_image",
    "mine_fixed",
    "calibrate",
    "adaptive_threshold",
    "mine_offline",
]


class MissingPrototypeError(ValueError):
    """Raised when a novel-class candidate has no prototype to score against."""


class Provenance(enum.Enum):
    OFFLINE = "offline"
    ONLINE = "online"


@dataclass(frozen=True)
class CandidateInstance:
    """One mined candidate: a box, its label, and its score history.

    ``raw_score`` is the detector's classification confidence;
    ``calibrated_score`` is set once a geometric-mean rescoring (cosine
    calibration offline, IoU correction online) has run.
    """

    image_id: int
    det_index: int
    box: Box
    label: int
    raw_score: float
    calibrated_score: float | None = None
    predicted_iou: float | None = None
    provenance: Provenance = Provenance.OFFLINE

    def __post_init__(self) -> None:
        if not (0.0 <= self.raw_score <= 1.0):
            raise ValueError(f"raw_score must lie in [0, 1], got {self.raw_score}")
        if self.calibrated_score is not None and not (0.0 <= self.calibrated_score <= 1.0):
            raise ValueError(f"calibrated_score must lie in [0, 1], got {self.calibrated_score}")

    @property
    def effective_score(self) -> float:
        """The score the pipeline thresholds and ranks on."""
        return self.raw_score if self.calibrated_score is None else self.calibrated_score

    @property
    def scored_box(self) -> ScoredBox:
        return ScoredBox(
            box=self.box,
            score=self.effective_score,
            label=self.label,
            iou_score=self.predicted_iou,
        )


@dataclass(frozen=True)
class ClassStats:
    """Score statistics behind one class's threshold; ``defined`` is False
    for classes that offered no candidates."""

    mean: float | None
    std: float | None
    threshold: float | None

    @property
    def defined(self) -> bool:
        return self.threshold is not None


@dataclass(frozen=True)
class CandidatePool:
    """The mined candidate set, grouped per novel class, with the statistics
    that produced each class's threshold.  Treated as immutable once built."""

    instances: dict[int, list[CandidateInstance]]
    stats: dict[int, ClassStats]

    def __post_init__(self) -> None:
        for class_id, members in self.instances.items():
            st = self.stats.get(class_id)
            for inst in members:
                if inst.label != class_id:
                    raise ValueError(
                        f"instance labeled {inst.label} stored under class {class_id}"
                    )
                if st is not None and st.defined and inst.effective_score < st.threshold - 1e-12:
                    raise ValueError(
                        f"class {class_id}: stored score {inst.effective_score} "
                        f"below threshold {st.threshold}"
                    )

    @property
    def classes(self) -> list[int]:
        return sorted(self.instances)

    def total(self) -> int:
        return sum(len(v) for v in self.instances.values())

    def count(self, class_id: int) -> int:
        return len(self.instances.get(class_id, []))

    def all_instances(self) -> list[CandidateInstance]:
        return [inst for class_id in self.classes for inst in self.instances[class_id]]

    def for_image(self, image_id: int) -> list[CandidateInstance]:
        """All stored instances mined from one image (the per-image slice
        the online loop mingles with)."""
        return [inst for inst in self.all_instances() if inst.image_id == image_id]


@dataclass(frozen=True)
class ProposalScore:
    """Scoring-head output for one proposal: per-class probabilities, the
    regressed box, and the IoU head's prediction when present."""

    class_scores: np.ndarray
    box: Box
    predicted_iou: float | None = None


class DetectorInterface(Protocol):
    """Behavioral contract for any detector the miners drive.

    Both calls must be deterministic for a fixed model state; class
    scores are per real class (background excluded) in [0, 1].
    """

    def propose(self, image_ref: Any) -> list[Box]: ...

    def score(self, image_ref: Any, boxes: Sequence[Box]) -> list[ProposalScore]: ...


def geometric_mean_score(a: float, b: float) -> float:
    """sqrt(a * b) for two unit-interval confidences.

    Shared by cosine calibration and IoU-branch correction; the result
    sits between min(a, b) and max(a, b) and never manufactures
    confidence.
    """
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise ValueError(f"geometric mean inputs must lie in [0, 1], got {a}, {b}")
    return math.sqrt(a * b)


def detections_from_scores(scored: Sequence[ProposalScore]) -> list[ScoredBox]:
    """Turn scoring-head outputs into one detection per proposal via the
    argmax class."""
    dets = []
    for ps in scored:
        probs = np.asarray(ps.class_scores, dtype=np.float64)
        label = int(np.argmax(probs))
        dets.append(
            ScoredBox(box=ps.box, score=float(probs[label]), label=label,
                      iou_score=ps.predicted_iou)
        )
    return dets


def detect_image(
    detector: DetectorInterface,
    image_id: int,
    image_ref: Any,
    nms_iou: float = 0.5,
) -> list[CandidateInstance]:
    """Full inference over one image: propose, score, argmax-label, and
    class-wise NMS; returns candidates indexed in post-NMS order."""
    proposals = detector.propose(image_ref)
    if not proposals:
        return []
    dets = detections_from_scores(detector.score(image_ref, proposals))
    kept = nms(dets, nms_iou, class_wise=True)
    return [
        CandidateInstance(
            image_id=image_id,
            det_index=i,
            box=sb.box,
            label=sb.label,
            raw_score=sb.score,
            predicted_iou=sb.iou_score,
            provenance=Provenance.OFFLINE,
        )
        for i, sb in enumerate(kept)
    ]


def candidates_from_detections(
    image_id: int,
    detections: Sequence[ScoredBox],
    nms_iou: float = 0.5,
) -> list[CandidateInstance]:
    """Same post-processing as :func:`detect_image`, for pre-dumped
    detections (e.g. from the export adapter)."""
    kept = nms(list(detections), nms_iou, class_wise=True)
    return [
        CandidateInstance(
            image_id=image_id,
            det_index=i,
            box=sb.box,
            label=sb.label,
            raw_score=sb.score,
            predicted_iou=sb.iou_score,
            provenance=Provenance.OFFLINE,
        )
        for i, sb in enumerate(kept)
    ]


def mine_fixed(
    detector: DetectorInterface,
    images: Sequence[tuple[int, Any]],
    delta: float,
    novel_classes: Collection[int],
    nms_iou: float = 0.5,
) -> CandidatePool:
    """Baseline mining: keep every novel-class detection scoring >= delta.

    No calibration, no statistics, no clamping; the recorded per-class
    threshold is the fixed delta itself.
    """
    if not (0.0 <= delta <= 1.0):
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    novel = set(novel_classes)
    per_image = ordered_map(
        lambda pair: detect_image(detector, pair[0], pair[1], nms_iou), images
    )
    instances: dict[int, list[CandidateInstance]] = {c: [] for c in sorted(novel)}
    for cands in per_image:
        for inst in cands:
            if inst.label in novel and inst.raw_score >= delta:
                instances[inst.label].append(inst)
    stats = {c: ClassStats(mean=None, std=None, threshold=delta) for c in instances}
    return CandidatePool(instances=instances, stats=stats)


def calibrate(
    candidates: Sequence[CandidateInstance],
    fmap_source: Mapping[int, FeatureMap] | Callable[[int], FeatureMap],
    prototypes: Sequence[ClassPrototype],
    temperature: float,
    pool_size: int = 7,
    novel_classes: Collection[int] | None = None,
) -> list[CandidateInstance]:
    """Rescore novel-class candidates with prototype cosine similarity.

    calibrated = sqrt(clamp(cos, 0, 1) * raw), using the cosine entry of
    the candidate's own class; base-class candidates pass through
    unmodified.  Negative similarities clamp to zero confidence.
    """
    by_class = {p.class_id: i for i, p in enumerate(prototypes)}
    novel = set(novel_classes) if novel_classes is not None else set(by_class)
    lookup = fmap_source if callable(fmap_source) else fmap_source.__getitem__

    def one(inst: CandidateInstance) -> CandidateInstance:
        if inst.label not in novel:
            return inst
        if inst.label not in by_class:
            raise MissingPrototypeError(
                f"candidate labeled novel class {inst.label} has no prototype"
            )
        try:
            fmap = lookup(inst.image_id)
            emb = roi_pool(fmap, inst.box, pool_size)
        except (KeyError, ValueError) as err:
            err.args = (f"calibrating image {inst.image_id}, class {inst.label}: {err}",)
            raise
        cos = cosine_scores(emb, prototypes, temperature)[by_class[inst.label]]
        cos = min(max(cos, 0.0), 1.0)
        return replace(inst, calibrated_score=geometric_mean_score(cos, inst.raw_score))

    return ordered_map(one, candidates)


def adaptive_threshold(
    by_class: Mapping[int, Sequence[CandidateInstance]],
    alpha: float,
    max_per_class: int,
) -> CandidatePool:
    """Filter each class by its own score distribution.

    threshold = mean + alpha * std (population std, so a single candidate
    yields std 0); instances scoring >= threshold survive, and if more
    than ``max_per_class`` do, the top ones by score are kept with ties
    at the cut broken by lower image id then lower detection index.

    The stored threshold is rounded at 1e-12 so score sets with exact
    decimal ties (mean of {0.2, 0.4, 0.6} is 0.4) compare the way the
    algebra says, despite float accumulation.
    """
    if not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    if max_per_class < 1:
        raise ValueError(f"max_per_class must be >= 1, got {max_per_class}")
    instances: dict[int, list[CandidateInstance]] = {}
    stats: dict[int, ClassStats] = {}
    for class_id in sorted(by_class):
        members = list(by_class[class_id])
        if not members:
            instances[class_id] = []
            stats[class_id] = ClassStats(mean=None, std=None, threshold=None)
            continue
        scores = np.array([inst.effective_score for inst in members], dtype=np.float64)
        mean = float(np.mean(scores))
        std = float(np.sqrt(np.mean((scores - mean) ** 2)))
        threshold = round(mean + alpha * std, 12)
        kept = [inst for inst in members if inst.effective_score >= threshold]
        if len(kept) > max_per_class:
            kept.sort(key=lambda c: (-c.effective_score, c.image_id, c.det_index))
            kept = kept[:max_per_class]
        instances[class_id] = kept
        stats[class_id] = ClassStats(mean=mean, std=std, threshold=threshold)
    return CandidatePool(instances=instances, stats=stats)


def mine_offline(
    detector: DetectorInterface,
    images: Sequence[tuple[int, Any]],
    ssl_fmaps: Mapping[int, FeatureMap] | Callable[[int], FeatureMap],
    shots: Sequence[tuple[FeatureMap, Box, int]],
    config: MiningConfig,
    use_calibration: bool = True,
) -> CandidatePool:
    """The full offline pipeline: prototypes from the shots, detector
    inference over the base images, optional cosine calibration, then
    class-wise adaptive thresholding."""
    prototypes = build_prototypes(shots, config.roi_pool_size)
    novel = [p.class_id for p in prototypes]
    per_image = ordered_map(
        lambda pair: detect_image(detector, pair[0], pair[1], config.nms_iou), images
    )
    candidates = [inst for cands in per_image for inst in cands if inst.label in set(novel)]
    if use_calibration:
        candidates = calibrate(
            candidates,
            ssl_fmaps,
            prototypes,
            config.temperature,
            config.roi_pool_size,
            novel_classes=novel,
        )
    grouped: dict[int, list[CandidateInstance]] = {c: [] for c in novel}
    for inst in candidates:
        grouped[inst.label].append(inst)
    return adaptive_threshold(grouped, config.alpha, config.max_per_class)
