"""Synthetic detection world generator.

Class identities live in latent space: each class owns one direction of
an orthonormal frame, object features are noisy draws around their
class direction, and every object is frozen with two independent noisy
views of its latent — one the detector sees, one painted into the
discriminator's feature maps.  Novel-class objects dropped into base
scenes are left unannotated; they are the mining target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..config import MiningConfig
from ..features import FeatureMap
from ..geometry import Box

__all__ = [
    "SceneObject",
    "SyntheticScene",
    "ToyWorld",
    "WorldInfeasibleError",
    "generate_world",
]


class WorldInfeasibleError(ValueError):
    """Raised when a world configuration cannot produce a usable dataset."""


@dataclass(frozen=True)
class SceneObject:
    """One object: its box, class, latent identity, and the frozen
    detector-view feature (latent plus detector noise)."""

    box: Box
    label: int
    latent: np.ndarray
    det_feature: np.ndarray
    annotated: bool

    def __post_init__(self) -> None:
        for name in ("latent", "det_feature"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class SyntheticScene:
    image_id: int
    width: float
    height: float
    objects: tuple[SceneObject, ...]
    bg_latent: np.ndarray
    bg_texture: np.ndarray  # (d, 2) linear field; background varies smoothly
    split: str  # "base" | "novel" | "test"

    def __post_init__(self) -> None:
        for name in ("bg_latent", "bg_texture"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def background_at(self, x: float, y: float) -> np.ndarray:
        """Background latent at an image location; the linear texture makes
        plain-background regions differ across the scene."""
        u = 2.0 * x / self.width - 1.0
        v = 2.0 * y / self.height - 1.0
        return self.bg_latent + self.bg_texture @ np.array([u, v])

    @property
    def implicit_objects(self) -> tuple[SceneObject, ...]:
        return tuple(o for o in self.objects if not o.annotated)

    @property
    def annotated_objects(self) -> tuple[SceneObject, ...]:
        return tuple(o for o in self.objects if o.annotated)


@dataclass(frozen=True)
class ToyWorld:
    """A generated dataset triple plus the frozen latent machinery."""

    config: MiningConfig
    class_means: np.ndarray        # (n_classes, d) orthonormal rows
    bg_direction: np.ndarray       # (d,)
    ssl_projection: np.ndarray     # (d, d) orthogonal; the discriminator's view
    base_scenes: tuple[SyntheticScene, ...]
    shot_scenes: tuple[SyntheticScene, ...]
    test_scenes: tuple[SyntheticScene, ...]
    ssl_fmaps: dict[int, FeatureMap]

    @property
    def n_classes(self) -> int:
        return self.config.n_base_classes + self.config.n_novel_classes

    @property
    def base_classes(self) -> list[int]:
        return list(range(self.config.n_base_classes))

    @property
    def novel_classes(self) -> list[int]:
        return list(range(self.config.n_base_classes, self.n_classes))

    @property
    def latent_dim(self) -> int:
        return self.class_means.shape[1]

    def class_name(self, class_id: int) -> str:
        if class_id < self.config.n_base_classes:
            return f"base_{class_id:02d}"
        return f"novel_{class_id - self.config.n_base_classes:02d}"

    def base_pairs(self) -> list[tuple[int, SyntheticScene]]:
        return [(s.image_id, s) for s in self.base_scenes]

    def shot_pairs(self) -> list[tuple[int, SyntheticScene]]:
        return [(s.image_id, s) for s in self.shot_scenes]

    def test_pairs(self) -> list[tuple[int, SyntheticScene]]:
        return [(s.image_id, s) for s in self.test_scenes]

    def shots(self) -> list[tuple[FeatureMap, Box, int]]:
        """The K annotated novel instances paired with their feature maps."""
        out = []
        for scene in self.shot_scenes:
            fmap = self.ssl_fmaps[scene.image_id]
            for obj in scene.objects:
                out.append((fmap, obj.box, obj.label))
        return out

    def gts_by_image(
        self,
        scenes: Sequence[SyntheticScene],
        include_unannotated: bool = True,
    ) -> dict[int, list[tuple[Box, int]]]:
        gts: dict[int, list[tuple[Box, int]]] = {}
        for scene in scenes:
            entries = [
                (o.box, o.label)
                for o in scene.objects
                if include_unannotated or o.annotated
            ]
            gts[scene.image_id] = entries
        return gts

    def scene_by_id(self, image_id: int) -> SyntheticScene:
        for group in (self.base_scenes, self.shot_scenes, self.test_scenes):
            for scene in group:
                if scene.image_id == image_id:
                    return scene
        raise KeyError(f"no scene with image id {image_id}")


def _random_box(rng: np.random.Generator, cfg: MiningConfig) -> Box:
    w = rng.uniform(cfg.min_box_size, cfg.max_box_size)
    h = rng.uniform(cfg.min_box_size, cfg.max_box_size)
    x1 = rng.uniform(0.0, cfg.extent - w)
    y1 = rng.uniform(0.0, cfg.extent - h)
    return Box(x1, y1, x1 + w, y1 + h)


def _object_latent(rng: np.random.Generator, mean: np.ndarray, spread: float) -> np.ndarray:
    vec = mean + spread * rng.standard_normal(mean.shape[0])
    return vec / np.linalg.norm(vec)


def _paint_fmap(
    scene: SyntheticScene,
    projection: np.ndarray,
    rng: np.random.Generator,
    cfg: MiningConfig,
) -> FeatureMap:
    cells = int(round(cfg.extent / cfg.ssl_stride))
    d = projection.shape[0]
    scene_shift = cfg.ssl_noise * rng.standard_normal(d)
    centers = (np.arange(cells) + 0.5) * cfg.ssl_stride
    data = np.empty((cells, cells, d))
    for i, cy in enumerate(centers):
        for j, cx in enumerate(centers):
            data[i, j] = projection @ (scene.background_at(cx, cy) + scene_shift)
    data = data + cfg.ssl_cell_noise * rng.standard_normal(data.shape)
    for obj in scene.objects:
        view = projection @ (obj.latent + cfg.ssl_noise * rng.standard_normal(d))
        cols = np.where((centers > obj.box.x1) & (centers < obj.box.x2))[0]
        rows = np.where((centers > obj.box.y1) & (centers < obj.box.y2))[0]
        if cols.size == 0 or rows.size == 0:
            continue
        patch = view + cfg.ssl_cell_noise * rng.standard_normal((rows.size, cols.size, d))
        data[np.ix_(rows, cols)] = patch
    return FeatureMap(data=data.astype(np.float32), stride=cfg.ssl_stride)


def generate_world(config: MiningConfig) -> ToyWorld:
    """Build the base/novel/test scene sets deterministically from the
    configured seed."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1000]))
    n_classes = config.n_base_classes + config.n_novel_classes
    d = config.latent_dim
    cells = int(round(config.extent / config.ssl_stride))
    if cells < 1:
        raise WorldInfeasibleError("ssl_stride larger than the scene extent")

    frame, _ = np.linalg.qr(rng.standard_normal((d, d)))
    class_means = frame[:, :n_classes].T.copy()
    bg_direction = frame[:, n_classes].copy()
    ssl_q, _ = np.linalg.qr(rng.standard_normal((d, d)))

    base_ids = range(config.n_base_scenes)
    novel_ids = range(config.n_base_scenes, config.n_base_scenes + config.shots * config.n_novel_classes)
    test_start = config.n_base_scenes + config.shots * config.n_novel_classes

    def make_object(label: int, annotated: bool) -> SceneObject:
        latent = _object_latent(rng, class_means[label], config.feature_noise)
        det_feature = latent + config.det_noise * rng.standard_normal(d)
        return SceneObject(
            box=_random_box(rng, config),
            label=label,
            latent=latent,
            det_feature=det_feature,
            annotated=annotated,
        )

    def scene_bg() -> np.ndarray:
        return _object_latent(rng, bg_direction, config.feature_noise)

    def scene_texture() -> np.ndarray:
        return config.bg_texture_noise * rng.standard_normal((d, 2))

    base_scenes = []
    for image_id in base_ids:
        n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
        objects = []
        for _ in range(n_obj):
            if rng.random() < config.co_occurrence:
                label = int(rng.integers(config.n_base_classes, n_classes))
                objects.append(make_object(label, annotated=False))
            else:
                label = int(rng.integers(0, config.n_base_classes))
                objects.append(make_object(label, annotated=True))
        base_scenes.append(
            SyntheticScene(
                image_id=image_id,
                width=config.extent,
                height=config.extent,
                objects=tuple(objects),
                bg_latent=scene_bg(),
                bg_texture=scene_texture(),
                split="base",
            )
        )

    seen_base = {o.label for s in base_scenes for o in s.objects if o.annotated}
    missing = sorted(set(range(config.n_base_classes)) - seen_base)
    if missing:
        raise WorldInfeasibleError(
            f"base classes {missing} never appear annotated; increase "
            f"n_base_scenes or lower co_occurrence"
        )

    shot_scenes = []
    image_id = config.n_base_scenes
    for novel in range(config.n_base_classes, n_classes):
        for _ in range(config.shots):
            obj = make_object(novel, annotated=True)
            shot_scenes.append(
                SyntheticScene(
                    image_id=image_id,
                    width=config.extent,
                    height=config.extent,
                    objects=(obj,),
                    bg_latent=scene_bg(),
                    bg_texture=scene_texture(),
                    split="novel",
                )
            )
            image_id += 1

    test_scenes = []
    for image_id in range(test_start, test_start + config.n_test_scenes):
        n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
        objects = tuple(
            make_object(int(rng.integers(0, n_classes)), annotated=True)
            for _ in range(n_obj)
        )
        test_scenes.append(
            SyntheticScene(
                image_id=image_id,
                width=config.extent,
                height=config.extent,
                objects=objects,
                bg_latent=scene_bg(),
                bg_texture=scene_texture(),
                split="test",
            )
        )

    fmaps: dict[int, FeatureMap] = {}
    for scene in (*base_scenes, *shot_scenes):
        fmaps[scene.image_id] = _paint_fmap(scene, ssl_q, rng, config)

    return ToyWorld(
        config=config,
        class_means=class_means,
        bg_direction=bg_direction,
        ssl_projection=ssl_q,
        base_scenes=tuple(base_scenes),
        shot_scenes=tuple(shot_scenes),
        test_scenes=tuple(test_scenes),
        ssl_fmaps=fmaps,
    )
