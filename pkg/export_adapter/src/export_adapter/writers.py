"""Writers for the engine's file formats.

Deliberately independent of the engine package: these encode the
documented schemas from scratch so the cross-component round trip is a
real check, not a shared code path.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

DETECTIONS_FORMAT_VERSION = 1
FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1


def write_fmap(data_hwc: np.ndarray, stride: float, path: str | Path) -> None:
    """Binary feature dump: FMAP magic, u16 version, u16 ndims, 3 x u32
    dims (H, W, C), f32 stride, then row-major f32 values, little endian."""
    arr = np.ascontiguousarray(data_hwc, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"feature tensor must be H x W x C, got shape {arr.shape}")
    h, w, c = arr.shape
    header = FMAP_MAGIC + struct.pack("<HH3If", FMAP_VERSION, 3, h, w, c, stride)
    Path(path).write_bytes(header + arr.tobytes())


def detection_entry(box: tuple[float, float, float, float], label: int, score: float,
                    iou_score: float | None = None) -> dict:
    entry = {"box": list(box), "label": int(label), "score": float(score)}
    if iou_score is not None:
        entry["iou_score"] = float(iou_score)
    return entry


def write_detections_json(
    classes: list[dict],
    images: list[dict],
    path: str | Path,
) -> None:
    """Detection dump: {format_version, classes: [{id, name, split}],
    images: [{image_id, width, height, detections: [...], gts: [...]}]}."""
    payload = {
        "format_version": DETECTIONS_FORMAT_VERSION,
        "classes": classes,
        "images": images,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
