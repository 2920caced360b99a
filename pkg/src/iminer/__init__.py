"""iminer: pseudo-label mining with offline co-mining and an online
EMA teacher-student loop, runnable end to end on a built-in synthetic
detection world."""

from .config import ConfigError, MiningConfig
from .features import (
    BoxOutsideExtentError,
    ClassPrototype,
    FeatureMap,
    MissingShotsError,
    ZeroNormError,
    build_prototypes,
    cosine_scores,
    roi_pool,
)
from .geometry import Box, ScoredBox, iou, nms
from .metrics import (
    APReport,
    MatchResult,
    average_precision,
    evaluate_detections,
    match_detections,
    pool_tp_count,
)
from .offline import (
    CandidateInstance,
    CandidatePool,
    ClassStats,
    DetectorInterface,
    MissingPrototypeError,
    ProposalScore,
    Provenance,
    adaptive_threshold,
    calibrate,
    geometric_mean_score,
    mine_fixed,
    mine_offline,
)
from .online import (
    DivergenceError,
    LossBreakdown,
    MingleRecord,
    ParameterVector,
    TeacherNotInitializedError,
    corrected_score,
    ema_update,
    finetune,
    mine_online_step,
    train_loop,
)

__version__ = "0.1.0"
