"""Run configuration: one JSON document validated with voluptuous, plus CLI overrides."""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Any, Optional

import voluptuous as vol

from .association import SCORE_CONFIDENCE, SCORE_GEOMETRIC, AssocConfig, ScoreConfig
from .const import (
    COMMANDS,
    CONF_ASSOC,
    CONF_COMMAND,
    CONF_DATASET,
    CONF_EVAL,
    CONF_FRAMES,
    CONF_NOISE,
    CONF_OBJECTS,
    CONF_OUT,
    CONF_RELATIONS,
    CONF_SCORE,
    CONF_SEED,
    CONF_SIM,
    CONF_SOLVER,
    CONF_VARIANT,
    CONFIG_SCHEMA,
    DEFAULT_ADDS_IOU,
    DEFAULT_CLASS_CONFUSION_RATE,
    DEFAULT_CONF_THRESHOLD,
    DEFAULT_CONFIDENCE_RANGE,
    DEFAULT_CONVERGENCE_TOL,
    DEFAULT_CURVE_MAX,
    DEFAULT_CURVE_SAMPLES,
    DEFAULT_EPS_C,
    DEFAULT_EPS_FP,
    DEFAULT_EPS_G,
    DEFAULT_EPS_N,
    DEFAULT_EPS_NEW,
    DEFAULT_EPS_OUT,
    DEFAULT_EPS_RES,
    DEFAULT_FALSE_POSITIVE_RATE,
    DEFAULT_GAUGE_SIGMA,
    DEFAULT_GRADIENT_TOL,
    DEFAULT_GRAVITY,
    DEFAULT_LAMBDA_INIT,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_MEAS_SIGMA_ROT,
    DEFAULT_MEAS_SIGMA_TRANS,
    DEFAULT_MERGE_COLLISION_THRESHOLD,
    DEFAULT_MIN_VISIBLE_PIXELS,
    DEFAULT_MISS_RATE,
    DEFAULT_N_FRAMES,
    DEFAULT_N_OBJECTS,
    DEFAULT_ODOM_SIGMA_ROT,
    DEFAULT_ODOM_SIGMA_TRANS,
    DEFAULT_OMEGA_P,
    DEFAULT_OMEGA_Q,
    DEFAULT_PRIOR_SIGMA_ROT,
    DEFAULT_PRIOR_SIGMA_TRANS,
    DEFAULT_SEED,
    DEFAULT_SIGMOID_MIDPOINT,
    DEFAULT_SIGMOID_SLOPE,
    DEFAULT_STAGE1_EVERY,
    DEFAULT_STAGE2_EVERY,
    DEFAULT_TABLE_EXTENTS,
    VARIANT_GEOFUSION,
    VARIANTS,
)
from .coordinator import PipelineConfig
from .evaluation import EvalConfig
from .exceptions import ConfigError
from .factors import diagonal_covariance
from .optimizer import SolverConfig
from .relations import RelationConfig
from .scene_sim import NoiseSpec

_LOGGER = logging.getLogger(__name__)

NonNegative = vol.All(vol.Coerce(float), vol.Range(min=0.0))
Positive = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))
Unit = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))
Count = vol.All(vol.Coerce(int), vol.Range(min=1))


def sigma_pair(value: Any) -> tuple[float, float]:
    """Validate a (rotation rad, translation m) standard deviation pair."""
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise vol.Invalid("Expected [sigma_rot, sigma_trans]")
    try:
        pair = (float(value[0]), float(value[1]))
    except (TypeError, ValueError) as err:
        raise vol.Invalid(f"Sigmas must be numbers: {err}") from err
    if min(pair) < 0.0:
        raise vol.Invalid("Sigmas must be >= 0")
    return pair


def unit_range(value: Any) -> tuple[float, float]:
    """Validate a [lo, hi] sub-range of [0, 1]."""
    lo, hi = sigma_pair(value)
    if not lo <= hi <= 1.0:
        raise vol.Invalid("Expected 0 <= lo <= hi <= 1")
    return lo, hi


def vector3(value: Any) -> tuple[float, float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise vol.Invalid("Expected a 3-vector")
    return tuple(float(v) for v in value)


NOISE_SCHEMA = vol.Schema(
    {
        vol.Optional("odom_sigma", default=[DEFAULT_ODOM_SIGMA_ROT, DEFAULT_ODOM_SIGMA_TRANS]): sigma_pair,
        vol.Optional("meas_sigma", default=[DEFAULT_MEAS_SIGMA_ROT, DEFAULT_MEAS_SIGMA_TRANS]): sigma_pair,
        vol.Optional("false_positive_rate", default=DEFAULT_FALSE_POSITIVE_RATE): NonNegative,
        vol.Optional("miss_rate", default=DEFAULT_MISS_RATE): Unit,
        vol.Optional("class_confusion_rate", default=DEFAULT_CLASS_CONFUSION_RATE): Unit,
        vol.Optional("rng_seed"): vol.Coerce(int),
        vol.Optional("confidence_true", default=list(DEFAULT_CONFIDENCE_RANGE)): unit_range,
        vol.Optional("confidence_false", default=list(DEFAULT_CONFIDENCE_RANGE)): unit_range,
    }
)

SCORE_SCHEMA = vol.Schema(
    {
        vol.Optional("eps_res", default=DEFAULT_EPS_RES): Positive,
        vol.Optional("eps_out", default=DEFAULT_EPS_OUT): Positive,
        vol.Optional("slope", default=DEFAULT_SIGMOID_SLOPE): Positive,
        vol.Optional("midpoint", default=DEFAULT_SIGMOID_MIDPOINT): Unit,
    }
)

ASSOC_SCHEMA = vol.Schema(
    {
        vol.Optional("eps_new", default=DEFAULT_EPS_NEW): NonNegative,
        vol.Optional("eps_fp", default=DEFAULT_EPS_FP): Unit,
        vol.Optional("meas_sigma", default=[DEFAULT_MEAS_SIGMA_ROT, DEFAULT_MEAS_SIGMA_TRANS]): sigma_pair,
        vol.Optional("merge_collision_threshold", default=DEFAULT_MERGE_COLLISION_THRESHOLD): Unit,
        vol.Optional("score_source", default=SCORE_GEOMETRIC): vol.In((SCORE_GEOMETRIC, SCORE_CONFIDENCE)),
        vol.Optional("merge", default=True): bool,
    }
)

RELATIONS_SCHEMA = vol.Schema(
    {
        vol.Optional("eps_n_pp", default=DEFAULT_EPS_N): Positive,
        vol.Optional("eps_c_pp", default=DEFAULT_EPS_C): Positive,
        vol.Optional("eps_n_pc", default=DEFAULT_EPS_N): Positive,
        vol.Optional("eps_c_pc", default=DEFAULT_EPS_C): Positive,
        vol.Optional("eps_c_cc", default=DEFAULT_EPS_C): Positive,
        vol.Optional("eps_G", default=DEFAULT_EPS_G): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0)),
        vol.Optional("gravity", default=list(DEFAULT_GRAVITY)): vector3,
    }
)

SOLVER_SCHEMA = vol.Schema(
    {
        vol.Optional("max_iterations", default=DEFAULT_MAX_ITERATIONS): Count,
        vol.Optional("lambda_init", default=DEFAULT_LAMBDA_INIT): Positive,
        vol.Optional("convergence_tol", default=DEFAULT_CONVERGENCE_TOL): Positive,
        vol.Optional("gradient_tol", default=DEFAULT_GRADIENT_TOL): Positive,
        vol.Optional("omega_p", default=DEFAULT_OMEGA_P): Positive,
        vol.Optional("omega_q", default=DEFAULT_OMEGA_Q): Positive,
        vol.Optional("odom_sigma", default=[DEFAULT_ODOM_SIGMA_ROT, DEFAULT_ODOM_SIGMA_TRANS]): sigma_pair,
        vol.Optional("meas_sigma", default=[DEFAULT_MEAS_SIGMA_ROT, DEFAULT_MEAS_SIGMA_TRANS]): sigma_pair,
        vol.Optional("stage1_every", default=DEFAULT_STAGE1_EVERY): Count,
        vol.Optional("stage2_every", default=DEFAULT_STAGE2_EVERY): Count,
        vol.Optional("gauge_sigma", default=DEFAULT_GAUGE_SIGMA): Positive,
        vol.Optional("prior_sigma", default=[DEFAULT_PRIOR_SIGMA_ROT, DEFAULT_PRIOR_SIGMA_TRANS]): sigma_pair,
        vol.Optional("strict", default=False): bool,
    }
)

SIM_SCHEMA = vol.Schema(
    {
        vol.Optional("min_visible_pixels", default=DEFAULT_MIN_VISIBLE_PIXELS): Count,
        vol.Optional("table_extents", default=list(DEFAULT_TABLE_EXTENTS)): vol.All(
            [Positive], vol.Length(min=2, max=2)
        ),
        vol.Optional("workers", default=1): Count,
    }
)

EVAL_SCHEMA = vol.Schema(
    {
        vol.Optional("conf_threshold", default=DEFAULT_CONF_THRESHOLD): Unit,
        vol.Optional("adds_iou", default=DEFAULT_ADDS_IOU): Unit,
        vol.Optional("curve_max", default=DEFAULT_CURVE_MAX): Positive,
        vol.Optional("curve_samples", default=DEFAULT_CURVE_SAMPLES): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("min_visible_pixels", default=DEFAULT_MIN_VISIBLE_PIXELS): Count,
        vol.Optional("workers", default=1): Count,
    }
)

CONFIG_DOCUMENT_SCHEMA = vol.Schema(
    {
        vol.Optional("schema", default=CONFIG_SCHEMA): CONFIG_SCHEMA,
        vol.Optional(CONF_COMMAND, default="all"): vol.In(COMMANDS),
        vol.Optional(CONF_DATASET): str,
        vol.Optional(CONF_OUT, default="out"): str,
        vol.Optional(CONF_VARIANT, default=VARIANT_GEOFUSION): vol.In(VARIANTS),
        vol.Optional(CONF_SEED, default=DEFAULT_SEED): vol.Coerce(int),
        vol.Optional(CONF_OBJECTS, default=DEFAULT_N_OBJECTS): Count,
        vol.Optional(CONF_FRAMES, default=DEFAULT_N_FRAMES): Count,
        vol.Optional(CONF_NOISE, default={}): NOISE_SCHEMA,
        vol.Optional(CONF_SCORE, default={}): SCORE_SCHEMA,
        vol.Optional(CONF_ASSOC, default={}): ASSOC_SCHEMA,
        vol.Optional(CONF_RELATIONS, default={}): RELATIONS_SCHEMA,
        vol.Optional(CONF_SOLVER, default={}): SOLVER_SCHEMA,
        vol.Optional(CONF_SIM, default={}): SIM_SCHEMA,
        vol.Optional(CONF_EVAL, default={}): EVAL_SCHEMA,
    }
)


@dataclass(frozen=True)
class RunConfig:
    """A validated configuration document with every module config built."""

    command: str = "all"
    dataset: Optional[Path] = None
    out: Path = Path("out")
    variant: str = VARIANT_GEOFUSION
    seed: int = DEFAULT_SEED
    objects: int = DEFAULT_N_OBJECTS
    frames: int = DEFAULT_N_FRAMES
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    association: AssocConfig = field(default_factory=AssocConfig)
    relations: RelationConfig = field(default_factory=RelationConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    min_visible_pixels: int = DEFAULT_MIN_VISIBLE_PIXELS
    table_extents: tuple[float, float] = DEFAULT_TABLE_EXTENTS
    workers: int = 1

    @property
    def dataset_path(self) -> Path:
        """Where the dataset lives: explicit path, else `<out>/dataset`."""
        return self.dataset if self.dataset is not None else self.out / "dataset"

    def run_dir(self, variant: str) -> Path:
        return self.out / "runs" / variant

    @property
    def eval_dir(self) -> Path:
        return self.out / "eval"

    def pipeline(self, variant: Optional[str] = None) -> PipelineConfig:
        return PipelineConfig(variant or self.variant, self.score, self.association, self.relations, self.solver)


def validate_document(document: dict[str, Any]) -> dict[str, Any]:
    """Apply the schema and its defaults.

    Raises:
        ConfigError: if the document does not match the schema
    """
    try:
        return CONFIG_DOCUMENT_SCHEMA(document)
    except vol.Invalid as err:
        raise ConfigError(f"Invalid configuration: {err}") from err


def build_run_config(document: dict[str, Any], overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Validate a document, apply non-None overrides, and build every module config.

    The noise seed follows the run seed unless the document pins `noise.rng_seed`.
    """
    merged = dict(document)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    data = validate_document(merged)

    noise = dict(data[CONF_NOISE])
    noise.setdefault("rng_seed", data[CONF_SEED])
    assoc = dict(data[CONF_ASSOC])
    solver = dict(data[CONF_SOLVER])
    sim = data[CONF_SIM]
    try:
        return RunConfig(
            command=data[CONF_COMMAND],
            dataset=Path(data[CONF_DATASET]) if CONF_DATASET in data else None,
            out=Path(data[CONF_OUT]),
            variant=data[CONF_VARIANT],
            seed=data[CONF_SEED],
            objects=data[CONF_OBJECTS],
            frames=data[CONF_FRAMES],
            noise=NoiseSpec(**noise),
            score=ScoreConfig(**data[CONF_SCORE]),
            association=AssocConfig(meas_noise=diagonal_covariance(*assoc.pop("meas_sigma")), **assoc),
            relations=RelationConfig(**data[CONF_RELATIONS]),
            solver=SolverConfig(
                q_odom=diagonal_covariance(*solver.pop("odom_sigma")),
                r_meas=diagonal_covariance(*solver.pop("meas_sigma")),
                prior_sigma=tuple(solver.pop("prior_sigma")),
                **solver,
            ),
            evaluation=EvalConfig(**data[CONF_EVAL]),
            min_visible_pixels=sim["min_visible_pixels"],
            table_extents=tuple(sim["table_extents"]),
            workers=sim["workers"],
        )
    except TypeError as err:
        raise ConfigError(f"Invalid configuration: {err}") from err


def load_config(path: Optional[Path], overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Read a JSON configuration document (or none) and build the run config.

    Raises:
        ConfigError: if the file cannot be read or fails validation
    """
    document: dict[str, Any] = {}
    if path is not None:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as err:
            raise ConfigError(f"Config file {path} not found") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"Config file {path} is not valid JSON: {err}") from err
        if not isinstance(document, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        _LOGGER.debug("Loaded configuration from %s", path)
    return build_run_config(document, overrides)
