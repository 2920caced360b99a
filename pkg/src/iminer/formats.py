"""File formats: detection dumps (JSON), feature maps (binary), candidate
pools (JSON), parameter vectors (binary), and the training stats CSV.

Detection dumps round-trip value-exact; feature maps and parameter
vectors round-trip bit-exact.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import FeatureMap
from .geometry import Box, ScoredBox
from .offline import CandidateInstance, CandidatePool, ClassStats, Provenance
from .online import LossBreakdown, MingleRecord, ParameterVector

__all__ = [
    "FormatError",
    "ClassInfo",
    "GTRecord",
    "ImageRecord",
    "DetectionDump",
    "save_detections",
    "load_detections",
    "save_features",
    "load_features",
    "save_pool",
    "load_pool",
    "save_params",
    "load_params",
    "write_stats_csv",
    "STATS_COLUMNS",
]

DETECTIONS_FORMAT_VERSION = 1
FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
PVEC_MAGIC = b"PVEC"
PVEC_VERSION = 1

# Fixed column order of the training stats CSV.
STATS_COLUMNS = ("iteration", "n_online_kept", "n_offline_kept", "l_cls", "l_reg", "l_iou", "total")


class FormatError(ValueError):
    """Malformed or invariant-violating file content."""


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    split: str  # "base" | "novel"

    def __post_init__(self) -> None:
        if self.split not in ("base", "novel"):
            raise FormatError(f"class {self.id}: split must be 'base' or 'novel', got {self.split!r}")


@dataclass(frozen=True)
class GTRecord:
    box: Box
    label: int
    annotated: bool = True


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: float
    height: float
    detections: tuple[ScoredBox, ...] = ()
    gts: tuple[GTRecord, ...] = ()


@dataclass(frozen=True)
class DetectionDump:
    classes: tuple[ClassInfo, ...]
    images: tuple[ImageRecord, ...]

    @property
    def class_ids(self) -> set[int]:
        return {c.id for c in self.classes}

    @property
    def novel_class_ids(self) -> list[int]:
        return sorted(c.id for c in self.classes if c.split == "novel")

    def detections_by_image(self) -> dict[int, list[ScoredBox]]:
        return {img.image_id: list(img.detections) for img in self.images}

    def gts_by_image(self, include_unannotated: bool = True) -> dict[int, list[tuple[Box, int]]]:
        return {
            img.image_id: [
                (gt.box, gt.label) for gt in img.gts if include_unannotated or gt.annotated
            ]
            for img in self.images
        }


def _box_payload(box: Box) -> list[float]:
    return [box.x1, box.y1, box.x2, box.y2]


def save_detections(dump: DetectionDump, path: str | Path) -> None:
    payload = {
        "format_version": DETECTIONS_FORMAT_VERSION,
        "classes": [{"id": c.id, "name": c.name, "split": c.split} for c in dump.classes],
        "images": [],
    }
    for img in dump.images:
        dets = []
        for det in img.detections:
            entry = {
                "box": _box_payload(det.box),
                "label": det.label,
                "score": det.score,
            }
            if det.iou_score is not None:
                entry["iou_score"] = det.iou_score
            dets.append(entry)
        payload["images"].append(
            {
                "image_id": img.image_id,
                "width": img.width,
                "height": img.height,
                "detections": dets,
                "gts": [
                    {"box": _box_payload(gt.box), "label": gt.label, "annotated": gt.annotated}
                    for gt in img.gts
                ],
            }
        )
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _parse_box(raw: object, where: str) -> Box:
    if not (isinstance(raw, list) and len(raw) == 4):
        raise FormatError(f"{where}: box must be a 4-element [x1, y1, x2, y2] list, got {raw!r}")
    try:
        return Box(float(raw[0]), float(raw[1]), float(raw[2]), float(raw[3]))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from exc


def load_detections(path: str | Path) -> DetectionDump:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON: {exc}") from exc
    if payload.get("format_version") != DETECTIONS_FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported format_version {payload.get('format_version')!r}"
        )
    classes = []
    for i, raw in enumerate(payload.get("classes", [])):
        try:
            classes.append(ClassInfo(id=int(raw["id"]), name=str(raw["name"]), split=raw["split"]))
        except (KeyError, TypeError, FormatError) as exc:
            raise FormatError(f"{path}: classes[{i}]: {exc}") from exc
    known = {c.id for c in classes}
    images = []
    for i, raw in enumerate(payload.get("images", [])):
        where = f"{path}: images[{i}]"
        dets = []
        for j, d in enumerate(raw.get("detections", [])):
            dwhere = f"{where}.detections[{j}]"
            box = _parse_box(d.get("box"), dwhere)
            label = int(d.get("label", -1))
            if label not in known:
                raise FormatError(f"{dwhere}: unknown class id {label}")
            score = float(d.get("score", -1.0))
            iou_score = d.get("iou_score")
            try:
                dets.append(
                    ScoredBox(
                        box=box,
                        score=score,
                        label=label,
                        iou_score=None if iou_score is None else float(iou_score),
                    )
                )
            except ValueError as exc:
                raise FormatError(f"{dwhere}: {exc}") from exc
        gts = []
        for j, g in enumerate(raw.get("gts", [])):
            gwhere = f"{where}.gts[{j}]"
            box = _parse_box(g.get("box"), gwhere)
            label = int(g.get("label", -1))
            if label not in known:
                raise FormatError(f"{gwhere}: unknown class id {label}")
            gts.append(GTRecord(box=box, label=label, annotated=bool(g.get("annotated", True))))
        try:
            images.append(
                ImageRecord(
                    image_id=int(raw["image_id"]),
                    width=float(raw["width"]),
                    height=float(raw["height"]),
                    detections=tuple(dets),
                    gts=tuple(gts),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{where}: {exc}") from exc
    return DetectionDump(classes=tuple(classes), images=tuple(images))


def save_features(fmap: FeatureMap, path: str | Path) -> None:
    header = FMAP_MAGIC + struct.pack(
        "<HH3If",
        FMAP_VERSION,
        3,
        fmap.height,
        fmap.width,
        fmap.channels,
        fmap.stride,
    )
    data = np.ascontiguousarray(fmap.data, dtype="<f4")
    Path(path).write_bytes(header + data.tobytes())


def load_features(path: str | Path) -> FeatureMap:
    blob = Path(path).read_bytes()
    head = struct.calcsize("<4sHH3If")
    if len(blob) < head:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, ndims, h, w, c, stride = struct.unpack("<4sHH3If", blob[:head])
    if magic != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if ndims != 3:
        raise FormatError(f"{path}: expected 3 dims, got {ndims}")
    expected = h * w * c * 4
    payload = blob[head:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload) // 4} floats, "
            f"dims {h}x{w}x{c} require {h * w * c}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    try:
        return FeatureMap(data=data, stride=float(stride))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_pool(pool: CandidatePool, path: str | Path) -> None:
    payload = {"format_version": 1, "classes": {}}
    for class_id in pool.classes:
        st = pool.stats.get(class_id, ClassStats(None, None, None))
        payload["classes"][str(class_id)] = {
            "stats": {"mean": st.mean, "std": st.std, "threshold": st.threshold},
            "instances": [
                {
                    "image_id": inst.image_id,
                    "det_index": inst.det_index,
                    "box": _box_payload(inst.box),
                    "label": inst.label,
                    "raw_score": inst.raw_score,
                    "calibrated_score": inst.calibrated_score,
                    "predicted_iou": inst.predicted_iou,
                    "provenance": inst.provenance.value,
                }
                for inst in pool.instances[class_id]
            ],
        }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_pool(path: str | Path) -> CandidatePool:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON: {exc}") from exc
    if payload.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported format_version")
    instances: dict[int, list[CandidateInstance]] = {}
    stats: dict[int, ClassStats] = {}
    for key, entry in payload.get("classes", {}).items():
        class_id = int(key)
        st = entry.get("stats", {})
        stats[class_id] = ClassStats(
            mean=st.get("mean"), std=st.get("std"), threshold=st.get("threshold")
        )
        members = []
        for j, raw in enumerate(entry.get("instances", [])):
            where = f"{path}: class {class_id} instances[{j}]"
            box = _parse_box(raw.get("box"), where)
            try:
                members.append(
                    CandidateInstance(
                        image_id=int(raw["image_id"]),
                        det_index=int(raw["det_index"]),
                        box=box,
                        label=int(raw["label"]),
                        raw_score=float(raw["raw_score"]),
                        calibrated_score=raw.get("calibrated_score"),
                        predicted_iou=raw.get("predicted_iou"),
                        provenance=Provenance(raw.get("provenance", "offline")),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{where}: {exc}") from exc
        instances[class_id] = members
    try:
        return CandidatePool(instances=instances, stats=stats)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_params(params: ParameterVector, path: str | Path) -> None:
    header = PVEC_MAGIC + struct.pack("<HQI", PVEC_VERSION, params.version, len(params))
    Path(path).write_bytes(header + np.ascontiguousarray(params.values, dtype="<f8").tobytes())


def load_params(path: str | Path) -> ParameterVector:
    blob = Path(path).read_bytes()
    head = struct.calcsize("<4sHQI")
    if len(blob) < head:
        raise FormatError(f"{path}: truncated header")
    magic, version, counter, length = struct.unpack("<4sHQI", blob[:head])
    if magic != PVEC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PVEC_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = blob[head:]
    if len(payload) != length * 8:
        raise FormatError(f"{path}: payload holds {len(payload) // 8} values, header says {length}")
    values = np.frombuffer(payload, dtype="<f8")
    return ParameterVector(values=values, version=counter)


def write_stats_csv(
    records: Sequence[MingleRecord],
    losses: Sequence[LossBreakdown],
    path: str | Path,
) -> None:
    if len(records) != len(losses):
        raise ValueError(
            f"record/loss count mismatch: {len(records)} vs {len(losses)}"
        )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_COLUMNS)
        for rec, loss in zip(records, losses):
            writer.writerow(
                [
                    rec.iteration,
                    rec.n_online_kept,
                    rec.n_offline_kept,
                    repr(loss.l_cls),
                    repr(loss.l_reg),
                    repr(loss.l_iou),
                    repr(loss.total),
                ]
            )
