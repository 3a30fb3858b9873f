"""Training-free image registration from language-prompted region correspondence.

The engine turns a fixed/moving image pair into matched region pairs by
prompting a segmentation backend with text, pooling embedding prototypes per
region, and pairing regions by prototype similarity.  Optionally, the region
pairs are converted into a dense displacement field by gradient descent on a
Dice + MSE alignment loss.
"""

from promptreg.correspondence import (
    CorrespondenceSet,
    MatchedPair,
    Prototype,
    SimilarityMatrix,
    match_greedy,
    match_mutual_nn,
    match_pipeline,
    pool_prototype,
    prototypes_for,
    similarity_matrix,
)
from promptreg.ddf import (
    DisplacementField,
    LossReport,
    OptimizeConfig,
    gradient,
    loss,
    optimize,
    read_ddf,
    soft_dice,
    soften_mask,
    warp,
    write_ddf,
)
from promptreg.fixture import FixtureScene, SceneError, fixture_generate
from promptreg.gateway import (
    BackendError,
    FilterPolicy,
    PromptRequest,
    PromptResponse,
    RoiRecord,
    fetch_rois,
    filter_boxes,
    validate_response,
)
from promptreg.metrics import (
    CaseMetrics,
    EvaluationReport,
    PromptStats,
    detection_ratio,
    dice,
    jacobian_negative_fraction,
    tre_centroid,
)
from promptreg.pipeline import (
    ConfigError,
    DivergenceError,
    PipelineConfig,
    cmd_evaluate,
    cmd_fixture,
    cmd_match,
    cmd_prompt_report,
    cmd_register,
    cmd_run,
)
from promptreg.volio import (
    BinaryMask,
    BoundingBox,
    EmbeddingGrid,
    FormatError,
    Volume,
    read_embedding,
    read_mask,
    read_volume,
    write_embedding,
    write_mask,
    write_volume,
)

__all__ = [
    "BackendError",
    "BinaryMask",
    "BoundingBox",
    "CaseMetrics",
    "ConfigError",
    "CorrespondenceSet",
    "DisplacementField",
    "DivergenceError",
    "EmbeddingGrid",
    "EvaluationReport",
    "FilterPolicy",
    "FixtureScene",
    "FormatError",
    "LossReport",
    "MatchedPair",
    "OptimizeConfig",
    "PipelineConfig",
    "PromptRequest",
    "PromptResponse",
    "PromptStats",
    "Prototype",
    "RoiRecord",
    "SceneError",
    "SimilarityMatrix",
    "Volume",
    "cmd_evaluate",
    "cmd_fixture",
    "cmd_match",
    "cmd_prompt_report",
    "cmd_register",
    "cmd_run",
    "detection_ratio",
    "dice",
    "fetch_rois",
    "filter_boxes",
    "fixture_generate",
    "gradient",
    "jacobian_negative_fraction",
    "loss",
    "match_greedy",
    "match_mutual_nn",
    "match_pipeline",
    "optimize",
    "pool_prototype",
    "prototypes_for",
    "read_ddf",
    "read_embedding",
    "read_mask",
    "read_volume",
    "similarity_matrix",
    "soft_dice",
    "soften_mask",
    "tre_centroid",
    "validate_response",
    "warp",
    "write_ddf",
    "write_embedding",
    "write_mask",
    "write_volume",
]

__version__ = "0.1.0"
