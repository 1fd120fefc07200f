# services/shared_config.py

# Single source of truth for constants shared by the rendering, training,
# decoding and evaluation services.

BLANK_ID = 0

DEFAULT_PUNCTUATION = ".,-:"

# Log-space stand-in for log(0). Large enough that adding a few hundred
# log-probabilities to it never reaches a representable probability.
LOG_ZERO = -1e30

DEFAULT_INPUT_HEIGHT = 32
DEFAULT_MAX_RENDER_WIDTH = 512

ADADELTA_RHO = 0.95
ADADELTA_EPS = 1e-6
BATCHNORM_MOMENTUM = 0.9
BATCHNORM_EPS = 1e-5
LSTM_FORGET_BIAS = 1.0

CHECKPOINT_MAGIC = b"CRNNCKPT1\n"
OPTIMIZER_PREFIX = "opt/"

MANIFEST_NAME = "manifest.tsv"
LABELS_NAME = "labels.tsv"
RENDER_SNAPSHOT_NAME = "render_config.cfg"
ATLAS_INDEX_NAME = "atlas.idx"
LOSS_LOG_NAME = "loss_log.tsv"
LATEST_CHECKPOINT_NAME = "latest.ckpt"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

VARIANTS = ("hybrid", "rnn-only")
DECODERS = ("greedy", "beam")
