"""Adapter-side reference pooling.

An independent route to the engine's pooled embedding: torchvision
roi_align with one sample per bin and half-pixel alignment, averaged
over the bins.  Used to cross-check prototypes built engine-side.
"""

from __future__ import annotations

import numpy as np
import torch
from torchvision.ops import roi_align


def reference_pooled_vector(
    data_hwc: np.ndarray,
    box: tuple[float, float, float, float],
    stride: float,
    pool_size: int,
) -> np.ndarray:
    """Mean over pool_size x pool_size single-sample aligned bins."""
    tensor = torch.from_numpy(
        np.ascontiguousarray(data_hwc, dtype=np.float64).transpose(2, 0, 1)[None]
    )
    rois = [torch.tensor([list(box)], dtype=torch.float64)]
    pooled = roi_align(
        tensor,
        rois,
        output_size=pool_size,
        spatial_scale=1.0 / stride,
        sampling_ratio=1,
        aligned=True,
    )
    return pooled[0].mean(dim=(1, 2)).numpy()
