"""Unrolled networks (DeMUN, PGD, Nesterov, AMP) for linear inverse problems y = Ax + w."""

from .tensor import (
    BatchNormState,
    DegenerateBatchError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    batch_norm,
    conv2d,
    matvec,
    matvec_T,
    mse,
    no_grad,
    relu,
)
from .optim import Adam, AdamState, adam_step
from .operators import (
    MeasurementOperator,
    NoiseModel,
    add_noise,
    input_snr,
    make_dct,
    make_gaussian,
    make_operator,
    normalize,
)
from .dncnn import DnCNNConfig, ProjectorParams, build_projector, project
from .unrolled import (
    ALGORITHMS,
    MemoryWeights,
    Trajectory,
    UnrollPlan,
    UnrolledNetwork,
    demun_combine,
    make_plan,
    mc_divergence,
    nesterov_step,
    nesterov_t_sequence,
    run_unrolled,
)
from .losses import LossSpec, LossSpecError, loss_intermediate, loss_last_layer, loss_skip
from .data import Dataset, DatasetError, ingest, load_cache, save_cache, split
from .train import (
    Checkpoint,
    MetricsReport,
    TrainConfig,
    TrainingDivergedError,
    baseline_psnr,
    baseline_reconstructions,
    evaluate,
    psnr,
    save_run,
    train,
)
from .config import ConfigError, ExperimentConfig, GridSpec

__version__ = "0.1.0"
