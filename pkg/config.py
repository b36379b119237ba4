"""
Configuration settings for the opaseg pulmonary-opacity toolkit.
"""
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

TOOLKIT_VERSION = "1.0.0"

# Preprocessing: lung window and per-slice normalization constants (HU)
LUNG_WINDOW_LOW_HU = int(os.getenv("LUNG_WINDOW_LOW_HU", "-1000"))
LUNG_WINDOW_HIGH_HU = int(os.getenv("LUNG_WINDOW_HIGH_HU", "350"))
NORM_MEAN_HU = float(os.getenv("NORM_MEAN_HU", "-653.2"))
NORM_STD_HU = float(os.getenv("NORM_STD_HU", "628.5"))

# Plausible CT range for stored attenuation values
HU_MIN = -1024
HU_MAX = 3071

# Groups counted as opacity by the opacity metrics
OPACITY_GROUPS = tuple(
    int(g) for g in os.getenv("OPACITY_GROUPS", "2,3,4").split(",") if g.strip()
)
LUNG_GROUP = 1

# Training groups 0..4 are the network outputs
N_TRAINING_GROUPS = 5

# Numerical constants
KL_EPSILON = float(os.getenv("KL_EPSILON", "1e-7"))
CONFIDENCE_EPSILON = float(os.getenv("CONFIDENCE_EPSILON", "5e-2"))
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Reproducibility and parallelism
DEFAULT_SEED = int(os.getenv("OPASEG_SEED", "0"))
THREADS = int(os.getenv("OPASEG_THREADS", "1"))

# Simulated annotation study size
N_ANNOTATORS = int(os.getenv("N_ANNOTATORS", "12"))

# Logging
LOG_LEVEL = os.getenv("OPASEG_LOG_LEVEL", "INFO")
