"""Errors raised by the GeoFusion backend."""

from __future__ import annotations

from typing import Any


class GeoFusionError(Exception):
    """Base error for the mapping backend."""


class ConfigError(GeoFusionError):
    """Error to indicate a configuration document failed validation."""


class DatasetError(GeoFusionError):
    """Error to indicate a dataset directory is missing or malformed."""


class PlacementFailure(GeoFusionError):
    """Error to indicate no collision-free object placement was found."""


class EmptyRender(GeoFusionError):
    """Error to indicate a hypothesis rendered no points into the frame."""


class InvalidTrack(GeoFusionError):
    """Error to indicate a tracked object has no supporting measurement."""


class DegenerateAxes(GeoFusionError):
    """Error to indicate two curved-feature axes are parallel."""


class BehindCamera(GeoFusionError):
    """Error to indicate an object has no point in front of the camera."""


class SingularSystem(GeoFusionError):
    """Error to indicate the normal equations cannot be solved."""


class NotConverged(GeoFusionError):
    """Error to indicate the solver stopped before converging."""

    def __init__(self, message: str, result: Any = None) -> None:
        """Keep the best-so-far result next to the message."""
        super().__init__(message)
        self.result = result
