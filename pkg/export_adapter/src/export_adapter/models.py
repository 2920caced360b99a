"""Model construction from command-line references.

A reference looks like ``torchvision:<constructor>``; weights load from
an optional state-dict path, otherwise the architecture runs with its
random (seeded) initialization, which is enough for format work and
tests.  Downloads are never attempted.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torchvision

RESNET_LAYERS = ("layer1", "layer2", "layer3", "layer4")


def _parse_ref(ref: str) -> str:
    scheme, _, name = ref.partition(":")
    if scheme != "torchvision" or not name:
        raise ValueError(
            f"unsupported model reference {ref!r}; expected 'torchvision:<name>'"
        )
    return name


def build_detector(ref: str, num_classes: int, weights_path: str | None = None,
                   seed: int = 0) -> nn.Module:
    """A torchvision detection model with ``num_classes`` outputs
    (background included, per torchvision convention)."""
    name = _parse_ref(ref)
    ctor = getattr(torchvision.models.detection, name, None)
    if ctor is None:
        raise ValueError(f"unknown torchvision detection model {name!r}")
    torch.manual_seed(seed)
    model = ctor(weights=None, weights_backbone=None, num_classes=num_classes)
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model


class TruncatedResNet(nn.Module):
    """A resnet cut after one of its residual stages; emits a single
    C-channel map."""

    def __init__(self, resnet: nn.Module, layer: str) -> None:
        super().__init__()
        if layer not in RESNET_LAYERS:
            raise ValueError(f"layer must be one of {RESNET_LAYERS}, got {layer!r}")
        stages = [resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool]
        for name in RESNET_LAYERS:
            stages.append(getattr(resnet, name))
            if name == layer:
                break
        self.trunk = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)


def build_backbone(ref: str, layer: str = "layer4", weights_path: str | None = None,
                   seed: int = 0) -> nn.Module:
    """A feature backbone truncated at ``layer``."""
    name = _parse_ref(ref)
    ctor = getattr(torchvision.models, name, None)
    if ctor is None:
        raise ValueError(f"unknown torchvision model {name!r}")
    torch.manual_seed(seed)
    resnet = ctor(weights=None)
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        resnet.load_state_dict(state)
    model = TruncatedResNet(resnet, layer)
    model.eval()
    return model


def load_image_tensor(path: str | Path) -> torch.Tensor:
    """RGB image as a (3, H, W) float tensor in [0, 1]."""
    from PIL import Image

    with Image.open(path) as img:
        rgb = img.convert("RGB")
        import numpy as np

        arr = np.asarray(rgb, dtype="float32") / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())
