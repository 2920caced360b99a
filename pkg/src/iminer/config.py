"""Engine configuration: every tunable in one flat, validated record.

Defaults marked in ``PAPER_STATED`` are published values; everything
else is an engineering default and is echoed with an ``assumed: true``
annotation by ``print-config``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

__all__ = ["MiningConfig", "ConfigError", "PAPER_STATED"]

# Fields whose defaults are fixed by published hyper-parameters rather
# than chosen here.
PAPER_STATED = frozenset(
    {
        "alpha",
        "max_per_class",
        "online_delta",
        "iou_loss_weight",
        "learning_rate",
        "finetune_learning_rate",
    }
)


class ConfigError(ValueError):
    """Invalid configuration value, key, or file."""


@dataclass(frozen=True)
class MiningConfig:
    # Offline mining
    alpha: float = 1.5                    # deviation coefficient of the adaptive threshold
    max_per_class: int = 300              # clamp on kept instances per novel class
    offline_fixed_delta: float = 0.8      # threshold for fixed-delta baseline mining
    temperature: float = 1.0              # cosine-similarity temperature
    roi_pool_size: int = 7                # bins per side when pooling embeddings
    nms_iou: float = 0.5                  # IoU threshold for all class-wise NMS

    # Online mining
    online_delta: float = 0.7             # confidence threshold for teacher-mined instances
    ema_momentum: float = 0.999           # teacher EMA momentum per step
    enhance_rpn: bool = True              # append offline boxes to teacher proposals
    enhance_rcnn: bool = True             # mingle offline boxes into the kept set
    iou_branch: bool = True               # geometric-mean correction with predicted IoU
    online_mining: bool = True            # teacher mining on/off (off = offline pool only)
    iou_loss_weight: float = 0.5          # weight of the IoU-head loss

    # Optimization
    learning_rate: float = 0.02
    finetune_learning_rate: float = 0.001
    shot_learning_rate: float = 0.02      # few-shot transfer stage rate
    base_iters: int = 1500
    shot_iters: int = 400
    online_iters: int = 2000
    finetune_iters: int = 150
    batch_size: int = 4
    augment_noise: float = 0.2           # feature-noise augmentation during training

    # Synthetic world
    seed: int = 0
    n_base_classes: int = 15
    n_novel_classes: int = 5
    shots: int = 2                        # K annotated instances per novel class
    n_base_scenes: int = 200
    n_test_scenes: int = 100
    co_occurrence: float = 0.3            # probability an object slot in a base scene is novel
    min_objects: int = 2
    max_objects: int = 5
    extent: float = 128.0
    min_box_size: float = 16.0
    max_box_size: float = 48.0
    latent_dim: int = 24
    feature_noise: float = 0.15           # spread of per-object latents around the class mean
    det_noise: float = 0.15               # detector-view noise frozen into each object
    ssl_noise: float = 0.15               # discriminator-view noise, independent of det_noise
    ssl_stride: float = 8.0
    ssl_cell_noise: float = 0.02          # per-cell jitter painted into feature maps
    bg_texture_noise: float = 0.25        # spatial variation of plain background
    proposal_jitter: float = 0.15
    proposals_per_object: int = 2
    n_background_boxes: int = 6

    def __post_init__(self) -> None:
        import math

        def bad(name: str, why: str) -> ConfigError:
            return ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        if not math.isfinite(self.alpha):
            raise bad("alpha", "must be finite")
        if self.max_per_class < 1:
            raise bad("max_per_class", "must be >= 1")
        for name in ("online_delta", "offline_fixed_delta", "nms_iou", "co_occurrence"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise bad(name, "must lie in [0, 1]")
        if self.iou_loss_weight < 0:
            raise bad("iou_loss_weight", "must be >= 0")
        if self.temperature <= 0:
            raise bad("temperature", "must be > 0")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise bad("ema_momentum", "must lie in [0, 1]")
        if self.roi_pool_size < 1:
            raise bad("roi_pool_size", "must be >= 1")
        for name in ("base_iters", "shot_iters", "online_iters", "finetune_iters"):
            if getattr(self, name) < 0:
                raise bad(name, "must be >= 0")
        for name in (
            "learning_rate",
            "finetune_learning_rate",
            "shot_learning_rate",
            "extent",
            "ssl_stride",
        ):
            if getattr(self, name) <= 0:
                raise bad(name, "must be > 0")
        for name in (
            "batch_size",
            "n_base_classes",
            "n_novel_classes",
            "shots",
            "n_base_scenes",
            "n_test_scenes",
            "min_objects",
            "proposals_per_object",
        ):
            if getattr(self, name) < 1:
                raise bad(name, "must be >= 1")
        if self.max_objects < self.min_objects:
            raise bad("max_objects", "must be >= min_objects")
        if self.n_background_boxes < 0:
            raise bad("n_background_boxes", "must be >= 0")
        for name in (
            "augment_noise",
            "feature_noise",
            "det_noise",
            "ssl_noise",
            "ssl_cell_noise",
            "bg_texture_noise",
        ):
            if getattr(self, name) < 0:
                raise bad(name, "must be >= 0")
        if not (0 < self.min_box_size <= self.max_box_size < self.extent):
            raise bad("max_box_size", "needs 0 < min_box_size <= max_box_size < extent")
        if self.latent_dim < self.n_base_classes + self.n_novel_classes + 1:
            raise bad("latent_dim", "must cover one direction per class plus background")

    # -- file round trip ---------------------------------------------------

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_file(cls, path: str | Path, **overrides: object) -> "MiningConfig":
        """Parse a flat ``key = value`` file; unknown keys are errors."""
        values: dict[str, object] = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, text = line.partition("=")
            key = key.strip()
            text = text.strip()
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(types[key], key, text, f"{path}:{lineno}")
        values.update(overrides)
        try:
            return cls(**values)  # type: ignore[arg-type]
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes: object) -> "MiningConfig":
        return dataclasses.replace(self, **changes)  # type: ignore[arg-type]

    def to_lines(self) -> list[str]:
        """Render as the flat file format, annotating non-published defaults."""
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value)
            suffix = "" if f.name in PAPER_STATED else "  # assumed: true"
            lines.append(f"{f.name} = {text}{suffix}")
        return lines


def _parse_value(ftype: object, key: str, text: str, where: str) -> object:
    name = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if name == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if name == "int":
            return int(text)
        if name == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc
