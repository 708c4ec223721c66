"""pychangen - synthetic change-detection data from simulated events and masked change diffusion."""

__version__ = "0.1.0"

from .errors import (
    ChangenError,
    CheckpointError,
    ChecksumError,
    ConfigurationError,
    DimensionError,
    EmptyDatasetError,
    InstanceLookupError,
    LeakageError,
    ParameterError,
    SchemaVersionError,
    StorageError,
)
from .scene import (
    ChangeMask,
    ContourMap,
    InstanceMap,
    LabeledScene,
    SemanticMask,
    change_mask_of,
    connected_components,
    dilate,
    extract_contours,
    instances_from_semantic,
)
from .events import (
    EventKind,
    EventOutcome,
    EventSpec,
    TransitionMatrix,
    simulate_contour_remove,
    simulate_create,
    simulate_edit,
    simulate_event,
    simulate_remove,
    simulate_sequence,
)
from .diffusion import (
    NoiseSchedule,
    ddim_step,
    make_sampling_steps,
    perturb,
    simple_loss,
    vlb_covariance_loss,
)
from .models.rsdit import DenoiserConfig, RSDiT
from .models.codec import Codec, PixelCodec
from .sampler import (
    DenseCondition,
    GuidanceConfig,
    MaskedChangeSampler,
    SynthesisRequest,
    TimeSeriesSample,
    synthesize_post_event,
    synthesize_time_series,
)
from .procedural import SceneSpec, gen_procedural_scene
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_denoiser
from .storage import read_sample, write_sample
from .datagen import (
    DatasetManifest,
    dataset_stats,
    generate_dataset,
    name_dataset,
    parse_dataset_name,
    verify_dataset,
)
from .models.detector import DetectorConfig, SiameseChangeDetector
from .evaluation import (
    BinaryChangeMetrics,
    compute_batch_metrics,
    compute_metrics,
    lambda_sweep,
    pretrain_detector,
    zero_shot_eval,
)
from .config import RunConfig, load_run_config

__all__ = [
    # Errors
    "ChangenError",
    "CheckpointError",
    "ChecksumError",
    "ConfigurationError",
    "DimensionError",
    "EmptyDatasetError",
    "InstanceLookupError",
    "LeakageError",
    "ParameterError",
    "SchemaVersionError",
    "StorageError",
    # Scene core
    "ChangeMask",
    "ContourMap",
    "InstanceMap",
    "LabeledScene",
    "SemanticMask",
    "change_mask_of",
    "connected_components",
    "dilate",
    "extract_contours",
    "instances_from_semantic",
    # Events
    "EventKind",
    "EventOutcome",
    "EventSpec",
    "TransitionMatrix",
    "simulate_contour_remove",
    "simulate_create",
    "simulate_edit",
    "simulate_event",
    "simulate_remove",
    "simulate_sequence",
    # Diffusion
    "NoiseSchedule",
    "ddim_step",
    "make_sampling_steps",
    "perturb",
    "simple_loss",
    "vlb_covariance_loss",
    # Networks
    "DenoiserConfig",
    "RSDiT",
    "Codec",
    "PixelCodec",
    "DetectorConfig",
    "SiameseChangeDetector",
    # Sampling
    "DenseCondition",
    "GuidanceConfig",
    "MaskedChangeSampler",
    "SynthesisRequest",
    "TimeSeriesSample",
    "synthesize_post_event",
    "synthesize_time_series",
    # Training and data
    "SceneSpec",
    "gen_procedural_scene",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "train_denoiser",
    "read_sample",
    "write_sample",
    "DatasetManifest",
    "dataset_stats",
    "generate_dataset",
    "name_dataset",
    "parse_dataset_name",
    "verify_dataset",
    # Evaluation
    "BinaryChangeMetrics",
    "compute_batch_metrics",
    "compute_metrics",
    "lambda_sweep",
    "pretrain_detector",
    "zero_shot_eval",
    # Config
    "RunConfig",
    "load_run_config",
    # Version
    "__version__",
]
