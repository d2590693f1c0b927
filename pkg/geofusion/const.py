"""Constants for the GeoFusion object-level mapping backend."""

from __future__ import annotations

from typing import Final

DOMAIN: Final = "geofusion"
DEFAULT_NAME: Final = "GeoFusion"

# Schema identifiers written into every file we emit
MODELS_SCHEMA: Final = "geofuse-models/1"
DATASET_SCHEMA: Final = "geofuse-dataset/1"
CONFIG_SCHEMA: Final = "geofuse-config/1"

# === CONFIGURATION DOCUMENT KEYS ===
CONF_COMMAND: Final = "command"
CONF_DATASET: Final = "dataset"
CONF_OUT: Final = "out"
CONF_VARIANT: Final = "variant"
CONF_SEED: Final = "seed"
CONF_OBJECTS: Final = "objects"
CONF_FRAMES: Final = "frames"
CONF_NOISE: Final = "noise"
CONF_SCORE: Final = "score"
CONF_ASSOC: Final = "association"
CONF_RELATIONS: Final = "relations"
CONF_SOLVER: Final = "solver"
CONF_SIM: Final = "simulation"
CONF_EVAL: Final = "evaluation"

# === COMMANDS AND VARIANTS ===
COMMANDS: Final = ("gen", "run", "eval", "bench", "all")

VARIANT_FBF: Final = "fbf"
VARIANT_BSLAM: Final = "b-slam"
VARIANT_RFRONT: Final = "r-front"
VARIANT_GEOFUSION: Final = "geofusion"
VARIANTS: Final = (VARIANT_FBF, VARIANT_BSLAM, VARIANT_RFRONT, VARIANT_GEOFUSION)

# === GEOMETRY ===
POSE_TOLERANCE: Final = 1e-9
DEFAULT_SAMPLE_SPACING: Final = 0.005  # meters between sampled surface points
SHAPE_BOX: Final = "box"
SHAPE_CYLINDER: Final = "cylinder"

# === SIMULATION ===
TABLE_ID: Final = 0  # reserved object id of the supporting table
DEFAULT_TABLE_EXTENTS: Final = (1.2, 0.8)  # meters, x by y
DEFAULT_GRAVITY: Final = (0.0, 0.0, -1.0)
DEFAULT_N_OBJECTS: Final = 18
DEFAULT_N_FRAMES: Final = 200
DEFAULT_SEED: Final = 7
DEFAULT_MIN_VISIBLE_PIXELS: Final = 200
DEFAULT_PLACEMENT_ATTEMPTS: Final = 400
DEFAULT_PLACEMENT_CLEARANCE: Final = 0.01  # meters kept free between non-touching objects
DEFAULT_FP_OFFSET: Final = 0.05  # spurious poses land within this distance of a real surface
DEFAULT_CONTACT_TOLERANCE: Final = 1e-4  # interpenetration allowed by the generator

# Camera (pixels)
DEFAULT_WIDTH: Final = 640
DEFAULT_HEIGHT: Final = 480
DEFAULT_FX: Final = 525.0
DEFAULT_FY: Final = 525.0
DEFAULT_CX: Final = 319.5
DEFAULT_CY: Final = 239.5

# Orbit around the table (meters / radians)
DEFAULT_ORBIT_RADIUS: Final = 0.9
DEFAULT_ORBIT_HEIGHT: Final = 0.55
DEFAULT_ORBIT_SWEEP: Final = 3.14159  # half a revolution over the sequence

# Noise defaults (radians / meters)
DEFAULT_ODOM_SIGMA_ROT: Final = 0.002
DEFAULT_ODOM_SIGMA_TRANS: Final = 0.002
DEFAULT_MEAS_SIGMA_ROT: Final = 0.0873  # 5 degrees
DEFAULT_MEAS_SIGMA_TRANS: Final = 0.01
DEFAULT_FALSE_POSITIVE_RATE: Final = 0.5
DEFAULT_MISS_RATE: Final = 0.1
DEFAULT_CLASS_CONFUSION_RATE: Final = 0.02
DEFAULT_CONFIDENCE_RANGE: Final = (0.5, 1.0)

# === ASSOCIATION ===
DEFAULT_EPS_RES: Final = 0.02  # wider than the default 1 cm measurement noise
DEFAULT_EPS_OUT: Final = 0.04
DEFAULT_SIGMOID_SLOPE: Final = 20.0
DEFAULT_SIGMOID_MIDPOINT: Final = 0.35
DEFAULT_EPS_NEW: Final = 1.0  # unnormalized likelihood units
DEFAULT_EPS_FP: Final = 0.4
DEFAULT_MERGE_COLLISION_THRESHOLD: Final = 0.5
NEW_OBJECT: Final = -1  # assignment marker for a freshly initialized object

# === RELATIONS ===
DEFAULT_EPS_N: Final = 0.1
DEFAULT_EPS_C: Final = 0.008
DEFAULT_EPS_G: Final = 0.8
DEGENERATE_AXES_NORM: Final = 1e-6
CURVE_HULL_POINTS: Final = 16  # points used to discretize a projected curved strip

RELATION_P2P: Final = "P2P"
RELATION_P2C: Final = "P2C"
RELATION_C2C: Final = "C2C"
RELATION_KINDS: Final = (RELATION_P2P, RELATION_P2C, RELATION_C2C)

# === SOLVER ===
DEFAULT_MAX_ITERATIONS: Final = 50
DEFAULT_LAMBDA_INIT: Final = 1e-4
DEFAULT_LAMBDA_RANGE: Final = (1e-12, 1e10)
DEFAULT_CONVERGENCE_TOL: Final = 1e-10
DEFAULT_GRADIENT_TOL: Final = 1e-10
DEFAULT_OMEGA_P: Final = 1e4  # 1/m^2
DEFAULT_OMEGA_Q: Final = 1e2
DEFAULT_STAGE1_EVERY: Final = 10
DEFAULT_STAGE2_EVERY: Final = 1
DEFAULT_GAUGE_SIGMA: Final = 1e-6
DEFAULT_PRIOR_SIGMA_ROT: Final = 0.1
DEFAULT_PRIOR_SIGMA_TRANS: Final = 0.05

# === EVALUATION ===
IOU_THRESHOLDS_50_95: Final = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DEFAULT_CONF_THRESHOLD: Final = 0.5
DEFAULT_ADDS_IOU: Final = 0.5
DEFAULT_CURVE_MAX: Final = 0.02
DEFAULT_CURVE_SAMPLES: Final = 41
RUNTIME_BUDGET_MS: Final = 200.0

# === EXIT CODES ===
EXIT_OK: Final = 0
EXIT_USAGE: Final = 1
EXIT_RUNTIME: Final = 2
