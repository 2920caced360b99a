import numpy as np
import pytest
from PIL import Image


DET_MODEL = "torchvision:fasterrcnn_mobilenet_v3_large_fpn"
SSL_MODEL = "torchvision:resnet18"


@pytest.fixture(scope="session")
def fixture_images(tmp_path_factory):
    """Five 64x64 images: three textured, one solid color, and one exact
    duplicate of a textured image."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(7)
    for i in range(3):
        arr = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        Image.fromarray(arr).save(root / f"img_{i:02d}.png")
    solid = np.full((64, 64, 3), 128, dtype=np.uint8)
    Image.fromarray(solid).save(root / "img_03_solid.png")
    dup = Image.open(root / "img_00.png")
    dup.save(root / "img_04_dup.png")
    return root


@pytest.fixture(scope="session")
def export_dir(fixture_images, tmp_path_factory):
    from export_adapter.export import run_export

    out = tmp_path_factory.mktemp("export")
    manifest = run_export(
        fixture_images,
        DET_MODEL,
        SSL_MODEL,
        out,
        score_floor=0.01,
        num_classes=6,
        novel_classes=(3, 4),
        layer="layer4",
        seed=0,
    )
    return out, manifest
