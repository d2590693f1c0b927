"""The GeoFusion object-level semantic mapping backend."""

from __future__ import annotations

import logging

from .const import DOMAIN
from .coordinator import MappingCoordinator, MapSnapshot, PipelineConfig, run_pipeline
from .geometry import ModelRegistry, Pose

_LOGGER = logging.getLogger(__name__)
_LOGGER.addHandler(logging.NullHandler())

__all__ = [
    "DOMAIN",
    "MapSnapshot",
    "MappingCoordinator",
    "ModelRegistry",
    "PipelineConfig",
    "Pose",
    "run_pipeline",
]
