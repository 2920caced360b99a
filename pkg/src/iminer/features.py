"""Feature-map pooling, class prototypes, and cosine-similarity scoring.

The discriminator side of co-mining: pooled embeddings from a dense
feature map are averaged into per-class prototypes, and candidate
embeddings are scored by temperature-scaled cosine similarity against
them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box

__all__ = [
    "FeatureMap",
    "ClassPrototype",
    "BoxOutsideExtentError",
    "MissingShotsError",
    "ZeroNormError",
    "roi_pool",
    "build_prototypes",
    "cosine_scores",
]


class BoxOutsideExtentError(ValueError):
    """Raised when a box to pool lies entirely outside the feature extent."""


class MissingShotsError(ValueError):
    """Raised when a class expected to have shots has none."""


class ZeroNormError(ValueError):
    """Raised when cosine similarity meets a zero-norm vector."""


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x C feature tensor with a stride in image pixels per cell.

    Data is stored as float32 (the on-disk precision); pooling math runs
    in float64.
    """

    data: np.ndarray
    stride: float

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"feature map must be H x W x C with positive dims, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map contains non-finite values")
        if not (np.isfinite(self.stride) and self.stride > 0):
            raise ValueError(f"stride must be positive and finite, got {self.stride}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def image_width(self) -> float:
        return self.width * self.stride

    @property
    def image_height(self) -> float:
        return self.height * self.stride


@dataclass(frozen=True)
class ClassPrototype:
    """Mean pooled embedding of one class's shot instances."""

    class_id: int
    mean_embedding: np.ndarray
    shot_count: int

    def __post_init__(self) -> None:
        emb = np.asarray(self.mean_embedding, dtype=np.float64)
        if emb.ndim != 1:
            raise ValueError("prototype embedding must be a flat vector")
        if not np.all(np.isfinite(emb)):
            raise ValueError("prototype embedding contains non-finite values")
        if self.shot_count < 1:
            raise ValueError(f"shot_count must be >= 1, got {self.shot_count}")
        emb.setflags(write=False)
        object.__setattr__(self, "mean_embedding", emb)


def _bilinear(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (x, y) feature-grid points bilinearly among cell centers.

    Cell (r, c) is centered at (c + 0.5, r + 0.5); samples beyond the
    outermost centers clamp to the border cell.
    """
    h, w = data.shape[0], data.shape[1]
    # Shift to the lattice where cell centers sit at integer coordinates.
    u = np.clip(xs - 0.5, 0.0, w - 1.0)
    v = np.clip(ys - 0.5, 0.0, h - 1.0)
    c0 = np.floor(u).astype(np.intp)
    r0 = np.floor(v).astype(np.intp)
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    fu = (u - c0)[:, None]
    fv = (v - r0)[:, None]
    d = data.astype(np.float64, copy=False)
    top = d[r0, c0] * (1.0 - fu) + d[r0, c1] * fu
    bottom = d[r1, c0] * (1.0 - fu) + d[r1, c1] * fu
    return top * (1.0 - fv) + bottom * fv


def roi_pool(fmap: FeatureMap, box: Box, pool_size: int) -> np.ndarray:
    """Pool a box region into a single C-vector.

    The box is mapped to feature coordinates via the stride and divided
    into ``pool_size`` x ``pool_size`` bins; each bin contributes one
    bilinear sample at its center, and the samples are averaged per
    channel.
    """
    if pool_size < 1:
        raise ValueError(f"pool_size must be >= 1, got {pool_size}")
    if (
        box.x2 <= 0.0
        or box.y2 <= 0.0
        or box.x1 >= fmap.image_width
        or box.y1 >= fmap.image_height
    ):
        raise BoxOutsideExtentError(
            f"box {box.as_tuple()} lies outside the "
            f"{fmap.image_width} x {fmap.image_height} feature extent"
        )
    fx1 = box.x1 / fmap.stride
    fy1 = box.y1 / fmap.stride
    bin_w = (box.x2 - box.x1) / fmap.stride / pool_size
    bin_h = (box.y2 - box.y1) / fmap.stride / pool_size
    offsets = np.arange(pool_size, dtype=np.float64) + 0.5
    xs = fx1 + offsets * bin_w
    ys = fy1 + offsets * bin_h
    grid_x = np.repeat(xs, pool_size)
    grid_y = np.tile(ys, pool_size)
    samples = _bilinear(fmap.data, grid_x, grid_y)
    return samples.mean(axis=0)


def build_prototypes(
    shots: Sequence[tuple[FeatureMap, Box, int]],
    pool_size: int,
    expected_classes: Iterable[int] | None = None,
) -> list[ClassPrototype]:
    """Pool each shot and average per class into prototypes.

    Prototypes come back sorted by class id; that order defines the
    concatenation order of cosine score vectors.  The per-channel mean
    sorts its summands first so the result is bit-exact under any shot
    permutation.
    """
    pooled: dict[int, list[np.ndarray]] = {}
    for fmap, box, class_id in shots:
        pooled.setdefault(class_id, []).append(roi_pool(fmap, box, pool_size))
    if expected_classes is not None:
        for class_id in expected_classes:
            if class_id not in pooled:
                raise MissingShotsError(f"no shots provided for class {class_id}")
    prototypes = []
    for class_id in sorted(pooled):
        stack = np.stack(pooled[class_id], axis=0)
        mean = np.sum(np.sort(stack, axis=0), axis=0) / stack.shape[0]
        prototypes.append(
            ClassPrototype(class_id=class_id, mean_embedding=mean, shot_count=stack.shape[0])
        )
    return prototypes


def cosine_scores(
    embedding: np.ndarray,
    prototypes: Sequence[ClassPrototype],
    temperature: float,
) -> np.ndarray:
    """Temperature-scaled cosine similarity against each prototype.

    Returns one value per prototype, in prototype order.  Values are not
    clamped here; score calibration decides how to treat negatives.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    emb = np.asarray(embedding, dtype=np.float64)
    norm = np.linalg.norm(emb)
    if norm == 0.0:
        raise ZeroNormError("candidate embedding has zero norm")
    out = np.empty(len(prototypes), dtype=np.float64)
    for i, proto in enumerate(prototypes):
        pnorm = np.linalg.norm(proto.mean_embedding)
        if pnorm == 0.0:
            raise ZeroNormError(f"prototype for class {proto.class_id} has zero norm")
        out[i] = temperature * float(emb @ proto.mean_embedding) / (norm * pnorm)
    return out
