CLIP_EPS = 1e-6  # Floor on Lambda_t for the quarter-cosine schedule
DEFAULT_BETA1 = 1e-4  # Linear-beta start
DEFAULT_BETA_END = 0.02  # Linear-beta value of 1 - lambda_T^2
DEFAULT_T = 1000
DEFAULT_SEED = 12345
EMBED_DIM = 16
HIDDEN_WIDTH = 128
HIDDEN_LAYERS = 2
EMBED_BASE = 10000.0  # Period scale of the sinusoidal level embedding
SCORE_GRID_POINTS = 401
SCORE_GRID_SPAN = 4.0  # Grid half-width in standard deviations
FLOAT_FORMAT = "%.17g"
EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING = 4
