"""Export adapter: bridges real pretrained models to the mining engine.

Runs a detection model and a feature backbone over an image folder and
writes detections.json, fmaps/*.fmap, and manifest.json.  No mining
logic lives here; every equation belongs to the engine.
"""

from .export import ExportManifest, run_export
from .pooling import reference_pooled_vector

__version__ = "0.1.0"

__all__ = ["ExportManifest", "run_export", "reference_pooled_vector"]
