"""
Configuration constants and defaults for the robust log-utility solver
"""

# Problem file schema
SCHEMA_VERSION = 1

# Environment overrides mirror the CLI flags: ROBUSTLOG_STEPS, ROBUSTLOG_SEED, ...
ENV_PREFIX = "ROBUSTLOG_"

# Output directory (created on demand)
OUTPUT_DIR = "output"

# Solver defaults
DEFAULT_STEPS = 200
DEFAULT_MODE = "auto"
MODES = ("auto", "ode", "lattice")
DEFAULT_CONVENTION = "calibrated"
CONVENTIONS = ("calibrated", "literal-paper")

# Lattice dimension caps (terminal slice holds (N+1)^m nodes)
MAX_LATTICE_BROWNIAN_DIM = 3
MAX_LATTICE_ASSETS = 3

# Monte Carlo defaults
DEFAULT_SEED = 20240601
DEFAULT_PATHS = 10000
MC_CHUNK_SIZE = 2048  # paths per spawned seed, independent of the worker count
MC_STD_ERROR_WARN_RATIO = 0.05

# Parallelism (never affects results)
DEFAULT_WORKERS = 1

# Piece optimizers
OPTIMIZER_GRAD_TOL = 1e-10
OPTIMIZER_MAX_ITER = 10_000

# Set membership / distance tolerance
MEMBERSHIP_TOL = 1e-10

# Penalty checks
GROWTH_CHECK_RADIUS = 5.0
GROWTH_CHECK_POINTS = 501
CONJUGATE_XTOL = 1e-12

# Verification defaults
DEFAULT_CHECKPOINT_FRACTIONS = (0.0, 0.25, 0.5, 0.75)
DEFAULT_PERTURBATIONS = 50
DEFAULT_PERTURBATION_SCALE = (0.05, 0.3)
# tol(N) = safety * C * sqrt(dt_N), C fitted on the N/4 and N/2 runs only;
# below sqrt(2) so a gap that does not shrink with dt fails
MARTINGALE_TOL_SAFETY = 1.25
ANCHOR_VALUE_TOL = 1e-3
CROSSCHECK_TOL = 2e-2
CLOSED_FORM_TOL = 1e-6
CLOSED_FORM_SAMPLES = 1000
SADDLE_PI_STEP = 1e-3
SADDLE_ETA_STEP = 1e-3

# CSV numeric format: 17 significant digits, literal INF / NaN tokens
CSV_FLOAT_FORMAT = "%.17g"
INF_TOKEN = "INF"
NAN_TOKEN = "NaN"
