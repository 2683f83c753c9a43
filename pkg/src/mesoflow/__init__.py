"""Flow-based temporal interpolation of multi-band geostationary imagery.

A library plus CLI for generating synthetic advection datasets, training
flow/visibility interpolation models, and evaluating them against a
linear baseline.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ContractError,
    DegenerateDataError,
    DivergenceError,
    FormatError,
    GridRangeError,
    MesoflowError,
    ParameterError,
    ValidationError,
)
from .imagery import (
    BandInfo,
    Frame,
    FrameSequence,
    GOES_R_BANDS,
    NormStats,
    RampEvent,
    Rotation,
    SyntheticScene,
    TextureParams,
    Translation,
    Vortex,
    compute_norm_stats,
    extract_point_series,
    generate_synthetic,
    read_frames,
    write_frames,
)
from .networks import (
    InterpolationModel,
    ModelSpec,
    SMALL_PLAN,
    UNetSpec,
    load_checkpoint,
    model_spec,
    param_count,
    save_checkpoint,
)
from .training import (
    LossBreakdown,
    LossWeights,
    TrainConfig,
    grid_search_lambdas,
    reconstruction_loss,
    sample_training_example,
    smoothness_loss,
    total_loss,
    train,
    warping_loss,
)
from .evaluation import (
    LinearPredictor,
    MetricsRecord,
    NetworkPredictor,
    SweepResult,
    compare_models,
    gap_sweep,
    psnr,
    reconstruct_series,
    rmse,
    ssim,
    time_sweep,
)
from .warpcore import (
    BlendTime,
    FlowField,
    VisibilityMap,
    approx_intermediate_flows,
    backward_warp,
    blend_visibility,
    linear_interpolate,
)
