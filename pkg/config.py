import os
from dotenv import load_dotenv

load_dotenv()

# Paths
OUTPUT_DIR = os.getenv("BOREX_OUTPUT_DIR", "runs")

# GP search (refinement loop)
N_ITERS = int(os.getenv("BOREX_N_ITERS", "50"))
SIZES = tuple(int(s) for s in os.getenv("BOREX_SIZES", "5,9,13").split(","))
KAPPA = float(os.getenv("BOREX_KAPPA", "2.0"))

# Kernel
NU = float(os.getenv("BOREX_NU", "1.5"))
LENGTH_SCALE = float(os.getenv("BOREX_LENGTH_SCALE", "12"))
NOISE_VAR = float(os.getenv("BOREX_NOISE_VAR", "1e-4"))

# Monte-Carlo priors
PRIOR_MASKS = int(os.getenv("BOREX_PRIOR_MASKS", "100"))
MC_GRID = int(os.getenv("BOREX_MC_GRID", "7"))
KEEP_PROB = float(os.getenv("BOREX_KEEP_PROB", "0.5"))

# Evaluation
METRIC_STEPS = int(os.getenv("BOREX_METRIC_STEPS", "20"))
FILL = float(os.getenv("BOREX_FILL", "0.0"))

# Execution controls
CLASSIFIER_TIMEOUT = float(os.getenv("BOREX_CLASSIFIER_TIMEOUT", "60"))
WORKERS = int(os.getenv("BOREX_WORKERS", "1"))
BATCH = int(os.getenv("BOREX_BATCH", "32"))
LOG_LEVEL = os.getenv("BOREX_LOG_LEVEL", "INFO")
