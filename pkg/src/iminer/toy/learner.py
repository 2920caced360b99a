"""Trainable toy detector: linear heads over a frozen random rotation.

The learner mirrors a two-stage detector at desk scale: a frozen
"backbone" (a fixed orthogonal projection of latent object features plus
proposal-offset coordinates), a softmax classifier with a background
class, a linear box regressor, and a sigmoid IoU head.  Losses are
cross-entropy, smooth-L1, and MSE, all with closed-form gradients so the
whole pipeline is finite-difference checkable.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..config import MiningConfig
from ..geometry import Box, iou
from ..offline import ProposalScore
from ..online import LossBreakdown, ParameterVector
from .world import SyntheticScene

__all__ = [
    "ToyLearner",
    "ToyDetector",
    "box_deltas",
    "apply_deltas",
    "head_losses",
    "run_training",
]

SMOOTH_L1_TRANSITION = 1.0
ASSIGN_IOU = 0.5
DELTA_CLIP = 4.0
# Output scale of the frozen backbone.  Head logits move at
# lr * |feature|^2 per unit gradient, so this sets how fast the linear
# heads converge under the standard learning rate.
FEATURE_GAIN = 16.0


def box_deltas(src: Box, dst: Box) -> np.ndarray:
    """Offset parameterization from a proposal to a target box."""
    sw, sh = src.width, src.height
    return np.array(
        [
            ((dst.x1 + dst.x2) - (src.x1 + src.x2)) / (2.0 * sw),
            ((dst.y1 + dst.y2) - (src.y1 + src.y2)) / (2.0 * sh),
            np.log(dst.width / sw),
            np.log(dst.height / sh),
        ]
    )


def apply_deltas(src: Box, deltas: np.ndarray, extent: float) -> Box:
    """Apply regression offsets, clipping so the result stays a valid box
    inside the scene."""
    dx, dy, dw, dh = np.clip(deltas, -DELTA_CLIP, DELTA_CLIP)
    cx = (src.x1 + src.x2) / 2.0 + dx * src.width
    cy = (src.y1 + src.y2) / 2.0 + dy * src.height
    w = min(max(src.width * np.exp(dw), 1.0), extent)
    h = min(max(src.height * np.exp(dh), 1.0), extent)
    cx = min(max(cx, w / 2.0), extent - w / 2.0)
    cy = min(max(cy, h / 2.0), extent - h / 2.0)
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def head_losses(
    w_cls: np.ndarray,
    w_reg: np.ndarray,
    w_iou: np.ndarray,
    aug: np.ndarray,
    labels: np.ndarray,
    reg_targets: np.ndarray,
    iou_targets: np.ndarray,
    pos_mask: np.ndarray,
) -> tuple[float, float, float, np.ndarray, np.ndarray, np.ndarray]:
    """Losses and analytic gradients for all three heads on one batch.

    Classification averages over every proposal; regression (smooth-L1
    summed over the four offsets) and the IoU head's MSE average over
    the positives only.  Gradients come back unweighted; the caller
    applies the IoU loss weight.
    """
    n = aug.shape[0]
    if n == 0:
        return 0.0, 0.0, 0.0, np.zeros_like(w_cls), np.zeros_like(w_reg), np.zeros_like(w_iou)

    logits = aug @ w_cls.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    l_cls = float(np.mean(log_z - shifted[np.arange(n), labels]))
    probs = _softmax(logits)
    d_logits = probs
    d_logits[np.arange(n), labels] -= 1.0
    g_cls = (d_logits / n).T @ aug

    n_pos = int(pos_mask.sum())
    g_reg = np.zeros_like(w_reg)
    g_iou = np.zeros_like(w_iou)
    l_reg = 0.0
    l_iou = 0.0
    if n_pos:
        aug_pos = aug[pos_mask]
        diff = aug_pos @ w_reg.T - reg_targets[pos_mask]
        small = np.abs(diff) < SMOOTH_L1_TRANSITION
        per = np.where(small, 0.5 * diff**2, np.abs(diff) - 0.5 * SMOOTH_L1_TRANSITION)
        l_reg = float(per.sum(axis=1).mean())
        d_diff = np.where(small, diff, np.sign(diff)) / n_pos
        g_reg = d_diff.T @ aug_pos

        z = (aug_pos @ w_iou.T)[:, 0]
        pred = _sigmoid(z)
        err = pred - iou_targets[pos_mask]
        l_iou = float(np.mean(err**2))
        d_z = 2.0 * err * pred * (1.0 - pred) / n_pos
        g_iou = (d_z[None, :] @ aug_pos)
    return l_cls, l_reg, l_iou, g_cls, g_reg, g_iou


def proposal_inputs(
    scene: SyntheticScene,
    boxes: Sequence[Box],
    latent_dim: int,
) -> np.ndarray:
    """Raw backbone inputs for each proposal: the overlap-weighted mix of
    the best object's detector-view feature with the scene background,
    concatenated with the offsets to that object's true box."""
    n = len(boxes)
    raw = np.zeros((n, latent_dim + 4))
    for k, box in enumerate(boxes):
        best_ov = 0.0
        best_obj = None
        for obj in scene.objects:
            ov = iou(box, obj.box)
            if ov > best_ov:
                best_ov = ov
                best_obj = obj
        bg = scene.background_at((box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0)
        if best_obj is None:
            raw[k, :latent_dim] = bg
        else:
            raw[k, :latent_dim] = best_ov * best_obj.det_feature + (1.0 - best_ov) * bg
            raw[k, latent_dim:] = box_deltas(box, best_obj.box)
    return raw


class ToyDetector:
    """Frozen-parameter inference view of a :class:`ToyLearner`.

    Proposals are jittered copies of the true object boxes plus uniform
    background boxes, drawn from a stream seeded by (config seed, image
    id) so inference is deterministic for a fixed model state.
    """

    def __init__(
        self,
        extractor: np.ndarray,
        w_cls: np.ndarray,
        w_reg: np.ndarray,
        w_iou: np.ndarray,
        n_classes: int,
        config: MiningConfig,
    ) -> None:
        self.extractor = extractor
        self.w_cls = w_cls
        self.w_reg = w_reg
        self.w_iou = w_iou
        self.n_classes = n_classes
        self.config = config
        self.latent_dim = extractor.shape[0] - 4

    def propose(self, image_ref: SyntheticScene) -> list[Box]:
        cfg = self.config
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 4100, image_ref.image_id])
        )
        proposals: list[Box] = []
        j = cfg.proposal_jitter
        for obj in image_ref.objects:
            if j == 0.0:
                # Identity proposals; center/size reconstruction would
                # otherwise perturb the box at machine precision.
                proposals.append(obj.box)
                continue
            for _ in range(cfg.proposals_per_object):
                w = obj.box.width * np.exp(rng.uniform(-j, j))
                h = obj.box.height * np.exp(rng.uniform(-j, j))
                cx = (obj.box.x1 + obj.box.x2) / 2.0 + rng.uniform(-j, j) * obj.box.width
                cy = (obj.box.y1 + obj.box.y2) / 2.0 + rng.uniform(-j, j) * obj.box.height
                w = min(max(w, 1.0), cfg.extent)
                h = min(max(h, 1.0), cfg.extent)
                cx = min(max(cx, w / 2.0), cfg.extent - w / 2.0)
                cy = min(max(cy, h / 2.0), cfg.extent - h / 2.0)
                proposals.append(Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0))
        for _ in range(cfg.n_background_boxes):
            w = rng.uniform(cfg.min_box_size, cfg.max_box_size)
            h = rng.uniform(cfg.min_box_size, cfg.max_box_size)
            x1 = rng.uniform(0.0, cfg.extent - w)
            y1 = rng.uniform(0.0, cfg.extent - h)
            proposals.append(Box(x1, y1, x1 + w, y1 + h))
        return proposals

    def features(self, scene: SyntheticScene, boxes: Sequence[Box]) -> np.ndarray:
        raw = proposal_inputs(scene, boxes, self.latent_dim)
        return raw @ self.extractor.T

    def score(self, image_ref: SyntheticScene, boxes: Sequence[Box]) -> list[ProposalScore]:
        if not boxes:
            return []
        feats = self.features(image_ref, boxes)
        aug = np.hstack([feats, np.ones((feats.shape[0], 1))])
        probs = _softmax(aug @ self.w_cls.T)
        regs = aug @ self.w_reg.T
        ious = _sigmoid((aug @ self.w_iou.T)[:, 0])
        out = []
        for k, box in enumerate(boxes):
            out.append(
                ProposalScore(
                    class_scores=probs[k, : self.n_classes].copy(),
                    box=apply_deltas(box, regs[k], self.config.extent),
                    predicted_iou=float(ious[k]),
                )
            )
        return out


class ToyLearner:
    """The student model: three trainable linear heads over a frozen
    orthogonal feature rotation."""

    def __init__(self, n_classes: int, latent_dim: int, config: MiningConfig) -> None:
        self.n_classes = n_classes
        self.latent_dim = latent_dim
        self.config = config
        d_in = latent_dim + 4
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7001]))
        q, _ = np.linalg.qr(rng.standard_normal((d_in, d_in)))
        self.extractor = FEATURE_GAIN * q
        self.w_cls = np.zeros((n_classes + 1, d_in + 1))
        self.w_reg = np.zeros((4, d_in + 1))
        self.w_iou = np.zeros((1, d_in + 1))
        self._version = 0

    @property
    def background_label(self) -> int:
        return self.n_classes

    def get_params(self) -> ParameterVector:
        flat = np.concatenate([self.w_cls.ravel(), self.w_reg.ravel(), self.w_iou.ravel()])
        return ParameterVector(values=flat, version=self._version)

    def set_params(self, params: ParameterVector) -> None:
        w_cls, w_reg, w_iou = self._unpack(params.values)
        self.w_cls = w_cls
        self.w_reg = w_reg
        self.w_iou = w_iou
        self._version = params.version

    def _unpack(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sizes = [self.w_cls.size, self.w_reg.size, self.w_iou.size]
        if flat.shape[0] != sum(sizes):
            raise ValueError(
                f"parameter vector length {flat.shape[0]} does not match "
                f"learner size {sum(sizes)}"
            )
        a = flat[: sizes[0]].reshape(self.w_cls.shape).copy()
        b = flat[sizes[0] : sizes[0] + sizes[1]].reshape(self.w_reg.shape).copy()
        c = flat[sizes[0] + sizes[1] :].reshape(self.w_iou.shape).copy()
        return a, b, c

    def as_detector(self, params: ParameterVector | None = None) -> ToyDetector:
        if params is None:
            w_cls, w_reg, w_iou = self.w_cls.copy(), self.w_reg.copy(), self.w_iou.copy()
        else:
            w_cls, w_reg, w_iou = self._unpack(params.values)
        return ToyDetector(
            extractor=self.extractor,
            w_cls=w_cls,
            w_reg=w_reg,
            w_iou=w_iou,
            n_classes=self.n_classes,
            config=self.config,
        )

    def _assemble_batch(
        self,
        images: Sequence[tuple[int, SyntheticScene]],
        extra_gts: Mapping[int, Sequence[tuple[Box, int]]],
        rng: np.random.Generator | None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        detector = self.as_detector()
        blocks = []
        labels: list[int] = []
        reg_rows = []
        iou_rows = []
        pos_flags = []
        for image_id, scene in images:
            proposals = detector.propose(scene)
            if not proposals:
                continue
            raw = proposal_inputs(scene, proposals, self.latent_dim)
            if rng is not None and self.config.augment_noise > 0:
                raw[:, : self.latent_dim] += self.config.augment_noise * rng.standard_normal(
                    (raw.shape[0], self.latent_dim)
                )
            blocks.append(raw @ self.extractor.T)
            gts = [(o.box, o.label) for o in scene.annotated_objects]
            gts.extend(extra_gts.get(image_id, ()))
            for box in proposals:
                best_ov = 0.0
                best = None
                for gt_box, gt_label in gts:
                    ov = iou(box, gt_box)
                    if ov > best_ov:
                        best_ov = ov
                        best = (gt_box, gt_label)
                if best is not None and best_ov >= ASSIGN_IOU:
                    labels.append(best[1])
                    reg_rows.append(box_deltas(box, best[0]))
                    iou_rows.append(best_ov)
                    pos_flags.append(True)
                else:
                    labels.append(self.background_label)
                    reg_rows.append(np.zeros(4))
                    iou_rows.append(0.0)
                    pos_flags.append(False)
        if not blocks:
            z = np.zeros((0, self.latent_dim + 4))
            return z, np.zeros(0, dtype=int), np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=bool)
        feats = np.vstack(blocks)
        return (
            feats,
            np.array(labels, dtype=int),
            np.vstack(reg_rows),
            np.array(iou_rows),
            np.array(pos_flags, dtype=bool),
        )

    def train_step(
        self,
        images: Sequence[tuple[int, SyntheticScene]],
        extra_gts: Mapping[int, Sequence[tuple[Box, int]]],
        *,
        beta: float,
        lr: float,
        rng: np.random.Generator,
    ) -> LossBreakdown:
        """One SGD step on cross-entropy + smooth-L1 + beta * IoU-MSE."""
        feats, labels, reg_t, iou_t, pos = self._assemble_batch(images, extra_gts, rng)
        if feats.shape[0] == 0:
            return LossBreakdown.build(0.0, 0.0, 0.0, beta)
        aug = np.hstack([feats, np.ones((feats.shape[0], 1))])
        l_cls, l_reg, l_iou, g_cls, g_reg, g_iou = head_losses(
            self.w_cls, self.w_reg, self.w_iou, aug, labels, reg_t, iou_t, pos
        )
        if not np.isfinite(l_cls + l_reg + l_iou):
            raise FloatingPointError(
                f"non-finite loss in train_step: cls={l_cls} reg={l_reg} iou={l_iou}"
            )
        self.w_cls = self.w_cls - lr * g_cls
        self.w_reg = self.w_reg - lr * g_reg
        self.w_iou = self.w_iou - lr * beta * g_iou
        self._version += 1
        return LossBreakdown.build(l_cls, l_reg, l_iou, beta)


def run_training(
    learner: ToyLearner,
    images: Sequence[tuple[int, SyntheticScene]],
    iters: int,
    lr: float,
    beta: float,
    rng: np.random.Generator,
    extra_gts: Mapping[int, Sequence[tuple[Box, int]]] | None = None,
) -> None:
    """Plain training loop over a fixed scene set (no mining)."""
    if iters == 0 or not images:
        return
    extra = extra_gts or {}
    n = len(images)
    order = rng.permutation(n)
    cursor = 0
    for _ in range(iters):
        batch = []
        for _ in range(min(learner.config.batch_size, n)):
            if cursor == n:
                order = rng.permutation(n)
                cursor = 0
            batch.append(images[order[cursor]])
            cursor += 1
        learner.train_step(batch, extra, beta=beta, lr=lr, rng=rng)
