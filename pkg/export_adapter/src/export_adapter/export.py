"""The export pipeline: detector dump + per-image feature dumps + manifest."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .models import build_backbone, build_detector, load_image_tensor
from .writers import detection_entry, write_detections_json, write_fmap

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ExportManifest:
    """What was emitted: images with dense ids, the class registry, a
    checksum for every written file, and notes about skipped inputs."""

    images: list[dict] = field(default_factory=list)
    classes: list[dict] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def add_file(self, out_dir: Path, path: Path) -> None:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.files[str(path.relative_to(out_dir))] = digest

    def write(self, out_dir: Path) -> None:
        payload = {
            "format_version": 1,
            "images": self.images,
            "classes": self.classes,
            "files": self.files,
            "skipped": self.skipped,
        }
        (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


def _class_registry(num_real_classes: int, novel: set[int]) -> list[dict]:
    registry = []
    for class_id in range(num_real_classes):
        registry.append(
            {
                "id": class_id,
                "name": f"class_{class_id:02d}",
                "split": "novel" if class_id in novel else "base",
            }
        )
    return registry


def run_export(
    image_dir: str | Path,
    det_model_ref: str,
    ssl_model_ref: str,
    out_dir: str | Path,
    score_floor: float = 0.05,
    num_classes: int = 91,
    novel_classes: tuple[int, ...] = (),
    layer: str = "layer4",
    stride_override: float | None = None,
    det_weights: str | None = None,
    ssl_weights: str | None = None,
    seed: int = 0,
) -> ExportManifest:
    """Export detections and feature maps for every readable image.

    The score floor sits well below any mining threshold so the engine
    sees the full score distribution its statistics need.
    """
    image_dir = Path(image_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fmaps").mkdir(exist_ok=True)
    if not (0.0 <= score_floor <= 1.0):
        raise ValueError(f"score_floor must lie in [0, 1], got {score_floor}")

    novel = set(novel_classes)
    unknown = novel - set(range(num_classes - 1))
    if unknown:
        raise ValueError(f"novel class ids {sorted(unknown)} outside the detector's range")

    manifest = ExportManifest(classes=_class_registry(num_classes - 1, novel))

    detector = build_detector(det_model_ref, num_classes, det_weights, seed=seed)
    backbone = build_backbone(ssl_model_ref, layer=layer, weights_path=ssl_weights, seed=seed)

    tensors: list[tuple[int, str, torch.Tensor]] = []
    next_id = 0
    for path in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            tensor = load_image_tensor(path)
        except Exception as exc:  # noqa: BLE001 - any unreadable image is skipped
            print(f"warning: skipping unreadable image {path.name}: {exc}", file=sys.stderr)
            manifest.skipped.append(path.name)
            continue
        tensors.append((next_id, path.name, tensor))
        manifest.images.append(
            {
                "id": next_id,
                "file": path.name,
                "width": int(tensor.shape[2]),
                "height": int(tensor.shape[1]),
            }
        )
        next_id += 1

    images_payload = []
    with torch.no_grad():
        for image_id, _name, tensor in tensors:
            height, width = tensor.shape[1], tensor.shape[2]
            output = detector([tensor])[0]
            dets = []
            for box, label, score in zip(
                output["boxes"].tolist(), output["labels"].tolist(), output["scores"].tolist()
            ):
                if score < score_floor:
                    continue
                x1 = min(max(box[0], 0.0), width)
                y1 = min(max(box[1], 0.0), height)
                x2 = min(max(box[2], 0.0), width)
                y2 = min(max(box[3], 0.0), height)
                if x2 - x1 <= 1e-6 or y2 - y1 <= 1e-6:
                    continue
                # torchvision labels are 1-based with 0 = background
                dets.append(detection_entry((x1, y1, x2, y2), int(label) - 1,
                                            min(max(score, 0.0), 1.0)))
            images_payload.append(
                {
                    "image_id": image_id,
                    "width": float(width),
                    "height": float(height),
                    "detections": dets,
                    "gts": [],
                }
            )

        for image_id, name, tensor in tensors:
            fmap = backbone(tensor[None])[0]  # (C, Hf, Wf)
            data = fmap.permute(1, 2, 0).numpy().astype(np.float32)
            h_f, w_f = data.shape[0], data.shape[1]
            width, height = tensor.shape[2], tensor.shape[1]
            stride_w = width / w_f
            stride_h = height / h_f
            if stride_override is not None:
                stride = stride_override
            else:
                if abs(stride_w - stride_h) > 1e-6:
                    raise ValueError(
                        f"{name}: anisotropic downsampling ({stride_w} x {stride_h}); "
                        "pass an explicit stride override"
                    )
                stride = stride_w
            write_fmap(data, stride, out / "fmaps" / f"{image_id}.fmap")
            manifest.add_file(out, out / "fmaps" / f"{image_id}.fmap")

    write_detections_json(manifest.classes, images_payload, out / "detections.json")
    manifest.add_file(out, out / "detections.json")
    manifest.write(out)
    return manifest
