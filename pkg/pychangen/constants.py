"""
Constants for pychangen.

This module centralizes all default values to ensure consistency across modules.
"""

# ========================================================================
# LABEL SPACE
# ========================================================================

# Class id designated background unless a mask overrides it
BACKGROUND_CLASS = 0

# Connectivity used for components and contours (8 = diagonal neighbors count)
DEFAULT_CONNECTIVITY = 8

# Dilation radius applied to the change mask before contour erasure
DEFAULT_DILATION_RADIUS = 1

# ========================================================================
# EVENT SIMULATION
# ========================================================================

# Rejection-sampling budget per pasted instance
DEFAULT_MAX_PLACEMENT_ATTEMPTS = 32

# Per-instance Bernoulli selection probability
DEFAULT_SELECTION_PROB = 0.5

# Row sums of a transition matrix must hit 1 within this tolerance
ROW_SUM_TOLERANCE = 1e-9

# ========================================================================
# NOISE SCHEDULE
# ========================================================================

DEFAULT_SCHEDULE_KIND = "linear"
DEFAULT_NUM_TRAIN_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2

# Cosine schedule offset and beta cap
COSINE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999

# Bin half-width of the discretized decoder likelihood for data in [-1, 1]
DECODER_BIN_HALF_WIDTH = 1.0 / 255.0

# ========================================================================
# DENOISER (desk-scale RS-DiT)
# ========================================================================

DEFAULT_PATCH_SIZE = 2
DEFAULT_HIDDEN_DIM = 192
DEFAULT_DEPTH = 8
DEFAULT_NUM_HEADS = 6
DEFAULT_WINDOW_SIZE = 4
DEFAULT_GLOBAL_ATTENTION_PERIOD = 4
DEFAULT_MLP_RATIO = 4.0
DEFAULT_IMAGE_CHANNELS = 3

# Dense embedding network: 8 conv-LN-SiLU blocks, 2x reduction between pairs
DENSE_EMBED_BLOCKS = 8
DENSE_EMBED_STRIDE = 8

# Sinusoidal timestep features fed to the timestep MLP
TIMESTEP_FREQUENCY_DIM = 256

CHECKPOINT_HEADER = "rsdit-v1"

# ========================================================================
# SAMPLING
# ========================================================================

DEFAULT_DDIM_STEPS = 50
DEFAULT_GUIDANCE_RATIO = 0.5

# ========================================================================
# DATASETS
# ========================================================================

SCHEMA_VERSION = 1
DATASET_NAME_PREFIX = "Changen2"
MANIFEST_FILE = "manifest.json"
SAMPLES_DIR = "samples"
SAMPLE_META_FILE = "meta.json"

# Desk-scale scene defaults
DEFAULT_SCENE_SIZE = 64
DEFAULT_OBJECT_COUNT_RANGE = (2, 6)
DEFAULT_OBJECT_SIZE_RANGE = (6, 14)
DEFAULT_SCENE_PLACEMENT_ATTEMPTS = 64

# ========================================================================
# DETECTOR / EVALUATION
# ========================================================================

DEFAULT_DETECTOR_WIDTH = 32
DEFAULT_DETECTOR_DEPTH = 2
DEFAULT_DETECTOR_STEPS = 5000
DEFAULT_DETECTOR_BATCH_SIZE = 8
DEFAULT_DETECTOR_LR = 1e-3

# Loss curve sampling period (steps)
LOSS_LOG_PERIOD = 50

DETECTOR_CHECKPOINT_HEADER = "changedet-v1"
