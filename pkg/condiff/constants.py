"""
Constants for condiff
"""

CI = 'CI'
CPU = 'CPU'
GPU = 'GPU'

ADDITIVE = 'ADDITIVE'
CONCAT = 'CONCAT'
NONE = 'NONE'

MEAN_LAST_K = 'MEAN_LAST_K'
MAJORITY_VOTE = 'MAJORITY_VOTE'

MEAN_FOREGROUND = 'MEAN_FOREGROUND'
PER_CLASS = 'PER_CLASS'
PER_IMAGE = 'PER_IMAGE'
POOLED = 'POOLED'

SYNTHETIC = 'SYNTHETIC'
FILE = 'FILE'

DEVICE_TYPES = {
    CPU: 'cpu',
    GPU: 'cuda',
}

TAGS = {
    CI: 'CI',
}

FEATURES = {
    CPU: 'cpu',
    GPU: 'gpu',
}

# a system name that matches no partition; checks assigned to it are filtered out
INVALID_SYSTEM = 'INVALID_SYSTEM'

# NONE is only meaningful for the ablation baseline: the adapter is not run and nothing is fused
FUSION_MODES = {
    ADDITIVE: 'additive',
    CONCAT: 'concat',
    NONE: 'none',
}

CONSENSUS_MODES = {
    MEAN_LAST_K: 'mean-last-k',
    MAJORITY_VOTE: 'majority-vote',
}

AVERAGING = {
    MEAN_FOREGROUND: 'mean-foreground',
    PER_CLASS: 'per-class',
}

AGGREGATION = {
    PER_IMAGE: 'per-image',
    POOLED: 'pooled',
}

DATA_SOURCES = {
    SYNTHETIC: 'synthetic',
    FILE: 'file',
}

EXIT_CODES = {
    'success': 0,
    'validation': 2,
    'runtime': 3,
}

# On-disk formats. All multi-byte fields are little-endian.
DATASET_MAGIC = b'CDDS'
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b'CDCK'
CHECKPOINT_VERSION = 1

# dtype codes shared by the dataset and checkpoint formats
DTYPE_CODES = {
    'float32': 0,
    'float64': 1,
    'int64': 2,
    'uint8': 3,
    'int32': 4,
    'bool': 5,
}

# Resolutions the profiler knows about:
# - 'desk': trainable on a CPU in minutes
# - 'benchmark': the reference setting of the lightweight profiling protocol (batch size 1)
PROFILE_SCALES = {
    'desk': {'resolution': 64, 'batch_size': 1},
    'benchmark': {'resolution': 352, 'batch_size': 1},
}

# Column set of the efficiency table
PROFILE_COLUMNS = [
    ('trainable_params', 'Params (M)'),
    ('reserved_memory_mb', 'Reserved (MB)'),
    ('typical_memory_mb', 'Typical (MB)'),
    ('train_ms_per_step', 'Train (ms)'),
    ('infer_ms_per_image', 'Inference (ms/img)'),
]

# Row order of the conditioning ablation table
ABLATION_ROWS = [FUSION_MODES[NONE], FUSION_MODES[CONCAT], FUSION_MODES[ADDITIVE]]

UNAVAILABLE = 'unavailable'
