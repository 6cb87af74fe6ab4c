"""Bandwidth-bounded region-of-interest proposals for maritime video.

A shallow next-frame-prediction autoencoder (plus classical baselines)
turns a video stream into per-pixel error maps; temporal momentum, a local
noise remover, horizon masking, and grid pooling turn those into a
budgeted set of rectangular regions per frame, with a recall-at-bandwidth
evaluation harness on top.
"""

from .autoencoder import (
    LossSpec,
    Model,
    ModelConfig,
    TrainSample,
    backward,
    build_model,
    forward,
    l1_loss,
    load_model,
    save_model,
    sliding_windows,
    train,
)
from .baselines import (
    GmmPixelState,
    MeanFilterState,
    frame_differencing_step,
    gmm_step,
    mean_filter_step,
)
from .core import (
    BoundingBox,
    ErrorFrame,
    Frame,
    GridSpec,
    RegionSet,
    Telemetry,
    ValidationError,
    box_area,
    make_error_frame,
    make_frame,
    validate_frame,
)
from .data import (
    AnomalySpec,
    SequenceManifest,
    SyntheticConfig,
    generate_synthetic,
    iter_synthetic,
    load_sequence,
    parse_ground_truth,
    read_predictions,
    write_predictions,
)
from .evaluate import (
    CANONICAL_BUDGETS,
    EvalReport,
    GroundTruth,
    area_recall_curve,
    average_recall,
    coverage,
    recall_at_p,
    recon_error_stats,
)
from .pipeline import PipelineConfig, RoiPipeline, score_sequence
from .postprocess import (
    CellScores,
    HorizonLine,
    apply_horizon_mask,
    grid_pool,
    horizon_line,
    label_components,
    local_noise_remover,
    merge_regions,
    select_regions,
)
from .temporal import ErrorRing, FrameRing, Ring, error_frame, momentum_average

__version__ = "0.1.0"
