"""Online mining: EMA teacher maintenance, per-iteration mingling of
teacher detections with the offline pool, IoU-corrected scoring, and the
student training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Collection, Mapping, Protocol, Sequence

import numpy as np

from .config import MiningConfig
from .geometry import Box, ScoredBox, nms
from .offline import (
    CandidateInstance,
    CandidatePool,
    DetectorInterface,
    Provenance,
    detections_from_scores,
    geometric_mean_score,
)

__all__ = [
    "ParameterVector",
    "MingleRecord",
    "LossBreakdown",
    "TeacherNotInitializedError",
    "DivergenceError",
    "TrainableLearner",
    "ema_update",
    "corrected_score",
    "mine_online_step",
    "train_loop",
    "finetune",
]


class TeacherNotInitializedError(RuntimeError):
    """Raised when online mining is attempted before a teacher exists."""


class DivergenceError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class ParameterVector:
    """A learner's full trainable state as a flat float64 vector."""

    values: np.ndarray
    version: int = 0

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("parameter vector must be flat")
        if not np.all(np.isfinite(arr)):
            raise ValueError("parameter vector contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MingleRecord:
    """Post-NMS survivor counts by provenance for one mining iteration."""

    iteration: int
    n_online_kept: int
    n_offline_kept: int

    def __post_init__(self) -> None:
        if self.n_online_kept < 0 or self.n_offline_kept < 0:
            raise ValueError("kept counts must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-head losses for one step; total = l_cls + l_reg + beta * l_iou."""

    l_cls: float
    l_reg: float
    l_iou: float
    total: float

    @classmethod
    def build(cls, l_cls: float, l_reg: float, l_iou: float, beta: float) -> "LossBreakdown":
        return cls(l_cls=l_cls, l_reg=l_reg, l_iou=l_iou,
                   total=l_cls + l_reg + beta * l_iou)


class TrainableLearner(Protocol):
    """What the training loop needs from a student model."""

    def get_params(self) -> ParameterVector: ...

    def set_params(self, params: ParameterVector) -> None: ...

    def as_detector(self, params: ParameterVector) -> DetectorInterface: ...

    def train_step(
        self,
        images: Sequence[tuple[int, Any]],
        extra_gts: Mapping[int, Sequence[tuple[Box, int]]],
        *,
        beta: float,
        lr: float,
        rng: np.random.Generator,
    ) -> LossBreakdown: ...


def ema_update(
    teacher: ParameterVector,
    student: ParameterVector,
    momentum: float,
) -> ParameterVector:
    """teacher' = momentum * teacher + (1 - momentum) * student."""
    if not (0.0 <= momentum <= 1.0):
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    if len(teacher) != len(student):
        raise ValueError(
            f"teacher/student length mismatch: {len(teacher)} vs {len(student)}"
        )
    blended = momentum * teacher.values + (1.0 - momentum) * student.values
    return ParameterVector(values=blended, version=teacher.version + 1)


def corrected_score(score: float, predicted_iou: float) -> float:
    """Fold the IoU head's localization estimate into the class score:
    sqrt(score * predicted_iou)."""
    return geometric_mean_score(score, predicted_iou)


def mine_online_step(
    teacher_detector: DetectorInterface | None,
    image_id: int,
    image_ref: Any,
    offline_instances: Sequence[CandidateInstance],
    delta: float,
    config: MiningConfig,
    novel_classes: Collection[int],
    iteration: int = 0,
) -> tuple[list[CandidateInstance], MingleRecord]:
    """Mine one image with the teacher and mingle with the offline pool.

    The teacher scores its proposals (plus the offline boxes when
    ``enhance_rpn``); novel detections whose (IoU-corrected, when the
    branch is on) score clears ``delta`` form the online set, which is
    merged with the offline instances (when ``enhance_rcnn``) by
    class-wise NMS.  Equal-score ties prefer the online instance.
    """
    if teacher_detector is None:
        raise TeacherNotInitializedError(
            "online mining requires an initialized teacher; run the warm "
            "offline stage first"
        )
    if not (0.0 <= delta <= 1.0):
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    novel = set(novel_classes)

    proposals = list(teacher_detector.propose(image_ref))
    if config.enhance_rpn:
        proposals.extend(inst.box for inst in offline_instances)

    online: list[CandidateInstance] = []
    if proposals:
        dets = detections_from_scores(teacher_detector.score(image_ref, proposals))
        for k, det in enumerate(dets):
            if det.label not in novel:
                continue
            corrected = None
            if config.iou_branch and det.iou_score is not None:
                corrected = corrected_score(det.score, det.iou_score)
            effective = det.score if corrected is None else corrected
            if effective >= delta:
                online.append(
                    CandidateInstance(
                        image_id=image_id,
                        det_index=k,
                        box=det.box,
                        label=det.label,
                        raw_score=det.score,
                        calibrated_score=corrected,
                        predicted_iou=det.iou_score,
                        provenance=Provenance.ONLINE,
                    )
                )

    mingle = list(online)
    if config.enhance_rcnn:
        mingle.extend(offline_instances)
    # Online candidates precede offline ones so the NMS insertion-order
    # tie-break prefers the fresher model on equal scores.
    scored = [
        ScoredBox(box=c.box, score=c.effective_score, label=c.label) for c in mingle
    ]
    back = {id(sb): cand for sb, cand in zip(scored, mingle)}
    survivors = [back[id(sb)] for sb in nms(scored, config.nms_iou, class_wise=True)]
    n_online = sum(1 for c in survivors if c.provenance is Provenance.ONLINE)
    record = MingleRecord(
        iteration=iteration,
        n_online_kept=n_online,
        n_offline_kept=len(survivors) - n_online,
    )
    return survivors, record


def train_loop(
    learner: TrainableLearner,
    base_images: Sequence[tuple[int, Any]],
    pool: CandidatePool,
    config: MiningConfig,
    novel_classes: Collection[int],
    rng: np.random.Generator,
    teacher_state: ParameterVector | None = None,
) -> tuple[ParameterVector, list[MingleRecord], list[LossBreakdown]]:
    """Teacher-student training over the base images.

    Each iteration mines pseudo ground truth for a batch (via the EMA
    teacher when ``online_mining`` is on, otherwise straight from the
    offline pool), takes one student step, and refreshes the teacher.
    The teacher starts as a copy of the student unless a state is given.
    """
    if teacher_state is None:
        teacher_state = ParameterVector(values=learner.get_params().values.copy())
    records: list[MingleRecord] = []
    losses: list[LossBreakdown] = []
    n = len(base_images)
    if n == 0 or config.online_iters == 0:
        return learner.get_params(), records, losses

    order = rng.permutation(n)
    cursor = 0
    per_image_pool = {image_id: pool.for_image(image_id) for image_id, _ in base_images}
    for it in range(config.online_iters):
        batch: list[tuple[int, Any]] = []
        for _ in range(min(config.batch_size, n)):
            if cursor == n:
                order = rng.permutation(n)
                cursor = 0
            batch.append(base_images[order[cursor]])
            cursor += 1

        pseudo: dict[int, list[tuple[Box, int]]] = {}
        n_online = n_offline = 0
        teacher_detector = learner.as_detector(teacher_state) if config.online_mining else None
        for image_id, image_ref in batch:
            offline_i = per_image_pool.get(image_id, [])
            if config.online_mining:
                survivors, rec = mine_online_step(
                    teacher_detector,
                    image_id,
                    image_ref,
                    offline_i,
                    config.online_delta,
                    config,
                    novel_classes,
                    iteration=it,
                )
                n_online += rec.n_online_kept
                n_offline += rec.n_offline_kept
            else:
                survivors = list(offline_i)
                n_offline += len(survivors)
            pseudo[image_id] = [(c.box, c.label) for c in survivors]
        records.append(
            MingleRecord(iteration=it, n_online_kept=n_online, n_offline_kept=n_offline)
        )

        breakdown = learner.train_step(
            batch,
            pseudo,
            beta=config.iou_loss_weight,
            lr=config.learning_rate,
            rng=rng,
        )
        if not math.isfinite(breakdown.total):
            raise DivergenceError(f"non-finite loss at iteration {it}: {breakdown}")
        losses.append(breakdown)
        teacher_state = ema_update(teacher_state, learner.get_params(), config.ema_momentum)
    return learner.get_params(), records, losses


def finetune(
    learner: TrainableLearner,
    shot_images: Sequence[tuple[int, Any]],
    config: MiningConfig,
    rng: np.random.Generator,
) -> ParameterVector:
    """Polish the heads on the clean annotated shots at a reduced rate.

    The toy learner's feature extractor is frozen by construction, so
    every optimized parameter is a head parameter.
    """
    if config.finetune_iters == 0 or not shot_images:
        return learner.get_params()
    n = len(shot_images)
    order = rng.permutation(n)
    cursor = 0
    for it in range(config.finetune_iters):
        batch: list[tuple[int, Any]] = []
        for _ in range(min(config.batch_size, n)):
            if cursor == n:
                order = rng.permutation(n)
                cursor = 0
            batch.append(shot_images[order[cursor]])
            cursor += 1
        breakdown = learner.train_step(
            batch,
            {},
            beta=config.iou_loss_weight,
            lr=config.finetune_learning_rate,
            rng=rng,
        )
        if not math.isfinite(breakdown.total):
            raise DivergenceError(f"non-finite loss at fine-tune iteration {it}: {breakdown}")
    return learner.get_params()
