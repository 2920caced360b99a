"""Self-contained synthetic detection world and trainable toy learner.

Scenes are abstract: objects carry latent feature vectors instead of
pixels, which isolates the mining math from any vision backbone while
preserving every interface the real pipeline needs.
"""

from .world import SceneObject, SyntheticScene, ToyWorld, WorldInfeasibleError, generate_world
from .learner import ToyDetector, ToyLearner, run_training
from .benchmark import BenchReport, RungResult, run_benchmark

__all__ = [
    "SceneObject",
    "SyntheticScene",
    "ToyWorld",
    "WorldInfeasibleError",
    "generate_world",
    "ToyDetector",
    "ToyLearner",
    "run_training",
    "BenchReport",
    "RungResult",
    "run_benchmark",
]
