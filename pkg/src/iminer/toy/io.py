"""World directory layout: meta.json + world.npz + fmaps/ + shots.json +
detections.json, so the miners consume toy data through the same file
formats as real dumps."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from ..config import ConfigError, MiningConfig
from ..formats import (
    ClassInfo,
    DetectionDump,
    GTRecord,
    ImageRecord,
    load_features,
    save_detections,
    save_features,
)
from ..geometry import Box
from .world import SceneObject, SyntheticScene, ToyWorld

__all__ = ["save_world", "load_world", "world_gt_dump"]

_SPLIT_CODES = {"base": 0, "novel": 1, "test": 2}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


def world_gt_dump(world: ToyWorld) -> DetectionDump:
    """Full ground truth (including implicit instances) for every scene,
    with empty detection lists."""
    classes = tuple(
        ClassInfo(
            id=c,
            name=world.class_name(c),
            split="base" if c in set(world.base_classes) else "novel",
        )
        for c in range(world.n_classes)
    )
    images = []
    for scene in (*world.base_scenes, *world.shot_scenes, *world.test_scenes):
        gts = tuple(
            GTRecord(box=o.box, label=o.label, annotated=o.annotated) for o in scene.objects
        )
        images.append(
            ImageRecord(
                image_id=scene.image_id,
                width=scene.width,
                height=scene.height,
                detections=(),
                gts=gts,
            )
        )
    return DetectionDump(classes=classes, images=images)


def save_world(world: ToyWorld, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fmaps").mkdir(exist_ok=True)

    meta = {
        "format_version": 1,
        "config": dataclasses.asdict(world.config),
        "classes": [
            {
                "id": c,
                "name": world.class_name(c),
                "split": "base" if c in set(world.base_classes) else "novel",
            }
            for c in range(world.n_classes)
        ],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    scenes = [*world.base_scenes, *world.shot_scenes, *world.test_scenes]
    obj_scene = []
    obj_box = []
    obj_label = []
    obj_annotated = []
    obj_latent = []
    obj_det = []
    for scene in scenes:
        for o in scene.objects:
            obj_scene.append(scene.image_id)
            obj_box.append(o.box.as_tuple())
            obj_label.append(o.label)
            obj_annotated.append(o.annotated)
            obj_latent.append(o.latent)
            obj_det.append(o.det_feature)
    np.savez(
        out / "world.npz",
        class_means=world.class_means,
        bg_direction=world.bg_direction,
        ssl_projection=world.ssl_projection,
        scene_ids=np.array([s.image_id for s in scenes], dtype=np.int64),
        scene_split=np.array([_SPLIT_CODES[s.split] for s in scenes], dtype=np.int8),
        scene_bg=np.array([s.bg_latent for s in scenes]),
        scene_bgtex=np.array([s.bg_texture for s in scenes]),
        scene_wh=np.array([[s.width, s.height] for s in scenes]),
        obj_scene=np.array(obj_scene, dtype=np.int64),
        obj_box=np.array(obj_box).reshape(-1, 4),
        obj_label=np.array(obj_label, dtype=np.int64),
        obj_annotated=np.array(obj_annotated, dtype=bool),
        obj_latent=np.array(obj_latent).reshape(-1, world.latent_dim),
        obj_det=np.array(obj_det).reshape(-1, world.latent_dim),
    )

    for image_id, fmap in sorted(world.ssl_fmaps.items()):
        save_features(fmap, out / "fmaps" / f"{image_id}.fmap")

    shots = [
        {"image_id": scene.image_id, "box": list(obj.box.as_tuple()), "label": obj.label}
        for scene in world.shot_scenes
        for obj in scene.objects
    ]
    (out / "shots.json").write_text(json.dumps(shots, indent=2) + "\n")

    save_detections(world_gt_dump(world), out / "detections.json")


def load_world(world_dir: str | Path) -> ToyWorld:
    root = Path(world_dir)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("format_version") != 1:
        raise ConfigError(f"{root}/meta.json: unsupported format_version")
    config = MiningConfig(**meta["config"])

    data = np.load(root / "world.npz")
    scene_ids = data["scene_ids"]
    by_scene: dict[int, list[SceneObject]] = {int(i): [] for i in scene_ids}
    for k in range(data["obj_scene"].shape[0]):
        box = Box(*data["obj_box"][k])
        by_scene[int(data["obj_scene"][k])].append(
            SceneObject(
                box=box,
                label=int(data["obj_label"][k]),
                latent=data["obj_latent"][k],
                det_feature=data["obj_det"][k],
                annotated=bool(data["obj_annotated"][k]),
            )
        )

    groups: dict[str, list[SyntheticScene]] = {"base": [], "novel": [], "test": []}
    for idx, image_id in enumerate(scene_ids):
        split = _SPLIT_NAMES[int(data["scene_split"][idx])]
        groups[split].append(
            SyntheticScene(
                image_id=int(image_id),
                width=float(data["scene_wh"][idx][0]),
                height=float(data["scene_wh"][idx][1]),
                objects=tuple(by_scene[int(image_id)]),
                bg_latent=data["scene_bg"][idx],
                bg_texture=data["scene_bgtex"][idx],
                split=split,
            )
        )

    fmaps = {}
    for path in sorted((root / "fmaps").glob("*.fmap")):
        fmaps[int(path.stem)] = load_features(path)

    return ToyWorld(
        config=config,
        class_means=data["class_means"],
        bg_direction=data["bg_direction"],
        ssl_projection=data["ssl_projection"],
        base_scenes=tuple(groups["base"]),
        shot_scenes=tuple(groups["novel"]),
        test_scenes=tuple(groups["test"]),
        ssl_fmaps=fmaps,
    )
