"""Anomaly detection for board images with variational autoencoders.

Train a convolutional (beta-)VAE on normal samples only, then flag test
samples whose reconstruction, evidence-bound or gradient-constraint score
exceeds a threshold calibrated on validation normals.
"""

from .config import ExperimentConfig, default_config, dump_config, load_config
from .data import (
    DatasetSplit,
    ImageSample,
    RawImage,
    SynthConfig,
    augment,
    generate_synthetic,
    load_split,
    preprocess,
)
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataError,
    EvalMismatchError,
    NumericError,
    ShapeError,
    TrainingDiverged,
    UsageError,
)
from .losses import (
    GradientState,
    elbo_loss,
    gradient_loss,
    kl_divergence,
    recon_loss,
    total_training_loss,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import (
    ConfusionCounts,
    Metrics,
    RunAggregate,
    aggregate_metric_runs,
    aggregate_runs,
    confusion,
    metrics_from_records,
    precision_recall_f1,
)
from .models import CaeModel, EncoderOutput, ModelSpec, VaeModel, build_model, reparameterize
from .scoring import (
    ScoreRecord,
    ScoringConfig,
    calibrate_threshold,
    decide,
    score_and_decide,
    score_elbo,
    score_gradcon,
    score_recon,
)
from .training import TrainedModel, TrainingConfig, train, validate_epoch
from .tsne import Embedding2D, scale_unit, tsne_embed

__version__ = "0.1.0"

__all__ = [
    "CaeModel",
    "CheckpointFormatError",
    "ConfigError",
    "ConfusionCounts",
    "DataError",
    "DatasetSplit",
    "Embedding2D",
    "EncoderOutput",
    "EvalMismatchError",
    "ExperimentConfig",
    "GradientState",
    "ImageSample",
    "Metrics",
    "ModelSpec",
    "NumericError",
    "RawImage",
    "RunAggregate",
    "ScoreRecord",
    "ScoringConfig",
    "ShapeError",
    "SynthConfig",
    "TrainedModel",
    "TrainingConfig",
    "TrainingDiverged",
    "UsageError",
    "VaeModel",
    "aggregate_metric_runs",
    "aggregate_runs",
    "augment",
    "build_model",
    "calibrate_threshold",
    "confusion",
    "decide",
    "default_config",
    "dump_config",
    "elbo_loss",
    "generate_synthetic",
    "gradient_loss",
    "kl_divergence",
    "load_checkpoint",
    "load_config",
    "load_split",
    "metrics_from_records",
    "precision_recall_f1",
    "preprocess",
    "recon_loss",
    "reparameterize",
    "save_checkpoint",
    "scale_unit",
    "score_and_decide",
    "score_elbo",
    "score_gradcon",
    "score_recon",
    "total_training_loss",
    "train",
    "tsne_embed",
    "validate_epoch",
]
