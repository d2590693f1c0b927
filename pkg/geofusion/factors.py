"""Residuals and analytic Jacobians of every factor in the mapping graph.

All Jacobians are taken under right perturbation, pose * exp(delta) with
delta = (rotation 3, translation 3), the same retraction the solver applies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Optional

import numpy as np

from .const import DEGENERATE_AXES_NORM, RELATION_C2C, RELATION_P2C, RELATION_P2P
from .exceptions import ConfigError, DegenerateAxes
from .geometry import (
    CurvedFeature,
    PlaneFeature,
    Pose,
    SurfaceFeature,
    skew,
    so3_log,
    so3_right_jacobian_inv,
    transform_feature,
)
from .relations import c2c_direction

Key = Hashable

_SWING_EPS = 1e-9


def whitening(covariance_or_information: np.ndarray, information: bool = False) -> np.ndarray:
    """Square-root information W with r^T Omega r = |W r|^2."""
    matrix = np.asarray(covariance_or_information, dtype=float)
    omega = matrix if information else np.linalg.inv(matrix)
    try:
        return np.linalg.cholesky(omega).T
    except np.linalg.LinAlgError as err:
        raise ConfigError(f"Information matrix is not positive definite: {err}") from err


def diagonal_covariance(sigma_rot: float, sigma_trans: float) -> np.ndarray:
    return np.diag([sigma_rot**2] * 3 + [sigma_trans**2] * 3)


# === Between residual E = B^-1 A C ===


def between(b: Pose, a: Pose, c: Pose) -> Pose:
    return b.inverse().compose(a).compose(c)


def between_residual(b: Pose, a: Pose, c: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log of B^-1 A C and its Jacobians with respect to B and A."""
    m = b.inverse().compose(a)
    e = m.compose(c)
    phi = so3_log(e.q)
    jr_inv = so3_right_jacobian_inv(phi)
    r_e = e.rotation
    r_m = m.rotation
    r_c = c.rotation

    jac_b = np.zeros((6, 6))
    jac_b[:3, :3] = -jr_inv @ r_e.T
    jac_b[3:, :3] = skew(e.t)
    jac_b[3:, 3:] = -np.eye(3)

    jac_a = np.zeros((6, 6))
    jac_a[:3, :3] = jr_inv @ r_c.T
    jac_a[3:, :3] = -r_m @ skew(c.t)
    jac_a[3:, 3:] = r_m
    return np.concatenate((phi, e.t)), jac_b, jac_a


def _swing(u: np.ndarray, axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation vector taking `axis` to `u`, with d(swing)/du."""
    w = np.cross(axis, u)
    c = float(axis @ u)
    n = float(np.linalg.norm(w))
    if n < _SWING_EPS:
        if c > 0.0:
            return w, skew(axis)
        # half-turn flip; any axis perpendicular to the symmetry axis works
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        perp = np.cross(axis, helper)
        perp /= np.linalg.norm(perp)
        return np.pi * perp, -skew(axis)
    w_hat = w / n
    theta = float(np.arctan2(n, c))
    outer = np.outer(w_hat, w_hat)
    ds_dw = c * outer + (theta / n) * (np.eye(3) - outer)
    ds_du = ds_dw @ skew(axis) - n * np.outer(w_hat, axis)
    return theta * w_hat, ds_du


def symmetric_between_residual(
    b: Pose, a: Pose, c: Pose, axis: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like between_residual, but rotation about the body `axis` of C is free.

    The rotation part is the swing that takes `axis` onto R_E axis, so the
    residual is unchanged by C * exp(theta * axis).
    """
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    m = b.inverse().compose(a)
    e = m.compose(c)
    r_e = e.rotation
    u = r_e @ axis
    swing, ds_du = _swing(u, axis)

    jac_b = np.zeros((6, 6))
    jac_b[:3, :3] = ds_du @ skew(u)
    jac_b[3:, :3] = skew(e.t)
    jac_b[3:, 3:] = -np.eye(3)

    r_m = m.rotation
    jac_a = np.zeros((6, 6))
    jac_a[:3, :3] = -ds_du @ r_e @ skew(axis) @ c.rotation.T
    jac_a[3:, :3] = -r_m @ skew(c.t)
    jac_a[3:, 3:] = r_m
    return np.concatenate((swing, e.t)), jac_b, jac_a


# === Residual helpers named after the operations they implement ===


def odometry_residual(x_prev: Pose, x_t: Pose, odom: Pose) -> np.ndarray:
    """log(relative(relative(x_prev, x_t), odom)); zero when x_t = x_prev * odom."""
    return between_residual(x_t, x_prev, odom)[0]


def measurement_residual(x_t: Pose, obj: Pose, z: Pose, symmetry: Optional[np.ndarray] = None) -> np.ndarray:
    """log(relative(relative(x_t, obj), z)), ignoring spin about the symmetry axis."""
    if symmetry is None:
        return between_residual(obj, x_t, z)[0]
    return symmetric_between_residual(obj, x_t, z, symmetry)[0]


def _p2c_pair(fa: SurfaceFeature, fb: SurfaceFeature) -> tuple[PlaneFeature, CurvedFeature]:
    if isinstance(fa, PlaneFeature) and isinstance(fb, CurvedFeature):
        return fa, fb
    if isinstance(fb, PlaneFeature) and isinstance(fa, CurvedFeature):
        return fb, fa
    raise ConfigError("P2C needs one plane and one curved feature")


def contact_residuals(
    kind: str,
    fa: SurfaceFeature,
    fb: SurfaceFeature,
    omega_p: float,
    omega_q: float,
    sign: Optional[float] = None,
) -> np.ndarray:
    """Weighted contact terms of two world-frame features.

    Each term carries sqrt(weight) so the solver minimizes the squared cost.
    For C2C, `sign` fixes the orientation of the common normal; without it the
    absolute axis distance is used.
    """
    sp, sq = np.sqrt(omega_p), np.sqrt(omega_q)
    if kind == RELATION_P2P:
        return np.array([sq * (fa.normal @ fb.normal + 1.0), sp * (fa.normal @ (fb.center - fa.center))])
    if kind == RELATION_P2C:
        plane, curved = _p2c_pair(fa, fb)
        return np.array(
            [sq * (plane.normal @ curved.axis), sp * (plane.normal @ (curved.center - plane.center) - curved.radius)]
        )
    if kind == RELATION_C2C:
        m = c2c_direction(fa, fb)
        along = float(m @ (fb.center - fa.center))
        s = np.sign(along) if sign is None else sign
        s = 1.0 if s == 0.0 else s
        return np.array([sp * (s * along - (fa.radius + fb.radius))])
    raise ConfigError(f"Unknown relation kind '{kind}'")


# === Factors ===


@dataclass
class Linearization:
    """Whitened residual and whitened Jacobian blocks per variable key."""

    residual: np.ndarray
    jacobians: dict[Key, np.ndarray]

    @property
    def cost(self) -> float:
        return 0.5 * float(self.residual @ self.residual)


class Factor:
    """Base factor: a residual over a few pose variables."""

    keys: tuple[Key, ...] = ()

    def error(self, values: dict[Key, Pose]) -> np.ndarray:
        """Whitened residual at the given values."""
        return self.linearize(values, jacobians=False).residual

    def cost(self, values: dict[Key, Pose]) -> float:
        r = self.error(values)
        return 0.5 * float(r @ r)

    def linearize(self, values: dict[Key, Pose], jacobians: bool = True) -> Linearization:
        raise NotImplementedError


class PriorFactor(Factor):
    """Pulls one pose toward a fixed prior: log(prior^-1 pose)."""

    def __init__(self, key: Key, prior: Pose, sqrt_info: np.ndarray) -> None:
        self.keys = (key,)
        self.prior = prior
        self.sqrt_info = np.asarray(sqrt_info, dtype=float)

    def linearize(self, values: dict[Key, Pose], jacobians: bool = True) -> Linearization:
        r, _, jac = between_residual(self.prior, values[self.keys[0]], Pose.identity())
        return Linearization(self.sqrt_info @ r, {self.keys[0]: self.sqrt_info @ jac} if jacobians else {})


class OdometryFactor(Factor):
    """Relative motion between consecutive robot poses."""

    def __init__(self, key_prev: Key, key_t: Key, odom: Pose, sqrt_info: np.ndarray) -> None:
        self.keys = (key_prev, key_t)
        self.odom = odom
        self.sqrt_info = np.asarray(sqrt_info, dtype=float)

    def linearize(self, values: dict[Key, Pose], jacobians: bool = True) -> Linearization:
        key_prev, key_t = self.keys
        r, jac_t, jac_prev = between_residual(values[key_t], values[key_prev], self.odom)
        if not jacobians:
            return Linearization(self.sqrt_info @ r, {})
        return Linearization(
            self.sqrt_info @ r, {key_prev: self.sqrt_info @ jac_prev, key_t: self.sqrt_info @ jac_t}
        )


class MeasurementFactor(Factor):
    """Camera-frame object observation z linking a robot pose and an object pose."""

    def __init__(
        self,
        key_x: Key,
        key_o: Key,
        z: Pose,
        sqrt_info: np.ndarray,
        symmetry: Optional[np.ndarray] = None,
    ) -> None:
        self.keys = (key_x, key_o)
        self.z = z
        self.sqrt_info = np.asarray(sqrt_info, dtype=float)
        self.symmetry = None if symmetry is None else np.asarray(symmetry, dtype=float)

    def linearize(self, values: dict[Key, Pose], jacobians: bool = True) -> Linearization:
        key_x, key_o = self.keys
        if self.symmetry is None:
            r, jac_o, jac_x = between_residual(values[key_o], values[key_x], self.z)
        else:
            r, jac_o, jac_x = symmetric_between_residual(values[key_o], values[key_x], self.z, self.symmetry)
        if not jacobians:
            return Linearization(self.sqrt_info @ r, {})
        return Linearization(self.sqrt_info @ r, {key_x: self.sqrt_info @ jac_x, key_o: self.sqrt_info @ jac_o})


def _feature_derivatives(
    feature: SurfaceFeature, pose: Pose
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """World direction and center of a body feature, with their 3x6 derivatives."""
    rot = pose.rotation
    body_dir = feature.normal if isinstance(feature, PlaneFeature) else feature.axis
    direction = rot @ body_dir
    center = rot @ feature.center + pose.t
    d_dir = np.zeros((3, 6))
    d_dir[:, :3] = -rot @ skew(body_dir)
    d_center = np.zeros((3, 6))
    d_center[:, :3] = -rot @ skew(feature.center)
    d_center[:, 3:] = rot
    return direction, center, d_dir, d_center


class ContactFactor(Factor):
    """P2P, P2C or C2C contact between a feature of object a and one of object b.

    A side whose key is None is a constant world feature (the table).
    For P2C the plane is side a.
    """

    def __init__(
        self,
        kind: str,
        key_a: Optional[Key],
        feature_a: SurfaceFeature,
        key_b: Optional[Key],
        feature_b: SurfaceFeature,
        omega_p: float,
        omega_q: float,
        sign: Optional[float] = None,
    ) -> None:
        if kind == RELATION_P2C and not (
            isinstance(feature_a, PlaneFeature) and isinstance(feature_b, CurvedFeature)
        ):
            raise ConfigError("P2C factors take the plane as side a")
        self.kind = kind
        self.key_a = key_a
        self.key_b = key_b
        self.keys = tuple(k for k in (key_a, key_b) if k is not None)
        self.feature_a = feature_a
        self.feature_b = feature_b
        self.sqrt_p = float(np.sqrt(omega_p))
        self.sqrt_q = float(np.sqrt(omega_q))
        self.sign = sign

    def _side(self, key: Optional[Key], feature: SurfaceFeature, values: dict[Key, Pose]):
        pose = Pose.identity() if key is None else values[key]
        return _feature_derivatives(feature, pose)

    def freeze_sign(self, values: dict[Key, Pose]) -> None:
        """Fix the C2C normal orientation from the current configuration."""
        if self.kind != RELATION_C2C:
            return
        fa = self.world_feature(self.key_a, self.feature_a, values)
        fb = self.world_feature(self.key_b, self.feature_b, values)
        along = float(c2c_direction(fa, fb) @ (fb.center - fa.center))
        self.sign = 1.0 if along >= 0.0 else -1.0

    @staticmethod
    def world_feature(key: Optional[Key], feature: SurfaceFeature, values: dict[Key, Pose]) -> SurfaceFeature:
        return feature if key is None else transform_feature(feature, values[key])

    def linearize(self, values: dict[Key, Pose], jacobians: bool = True) -> Linearization:
        dir_a, c_a, ddir_a, dc_a = self._side(self.key_a, self.feature_a, values)
        dir_b, c_b, ddir_b, dc_b = self._side(self.key_b, self.feature_b, values)

        if self.kind == RELATION_P2P:
            residual = np.array([self.sqrt_q * (dir_a @ dir_b + 1.0), self.sqrt_p * (dir_a @ (c_b - c_a))])
            jac_a = np.vstack((self.sqrt_q * dir_b @ ddir_a, self.sqrt_p * ((c_b - c_a) @ ddir_a - dir_a @ dc_a)))
            jac_b = np.vstack((self.sqrt_q * dir_a @ ddir_b, self.sqrt_p * (dir_a @ dc_b)))
        elif self.kind == RELATION_P2C:
            radius = self.feature_b.radius
            residual = np.array(
                [self.sqrt_q * (dir_a @ dir_b), self.sqrt_p * (dir_a @ (c_b - c_a) - radius)]
            )
            jac_a = np.vstack((self.sqrt_q * dir_b @ ddir_a, self.sqrt_p * ((c_b - c_a) @ ddir_a - dir_a @ dc_a)))
            jac_b = np.vstack((self.sqrt_q * dir_a @ ddir_b, self.sqrt_p * (dir_a @ dc_b)))
        else:
            w = np.cross(dir_a, dir_b)
            norm = float(np.linalg.norm(w))
            if norm < DEGENERATE_AXES_NORM:
                raise DegenerateAxes(f"Curved axes became parallel (|Na x Nb| = {norm:.3g})")
            if self.sign is None:
                self.sign = 1.0
            m = w / norm
            d = c_b - c_a
            radii = self.feature_a.radius + self.feature_b.radius
            residual = np.array([self.sqrt_p * (self.sign * float(m @ d) - radii)])
            proj = (np.eye(3) - np.outer(m, m)) / norm
            dm_a = proj @ (-skew(dir_b)) @ ddir_a
            dm_b = proj @ skew(dir_a) @ ddir_b
            jac_a = (self.sqrt_p * self.sign * (d @ dm_a - m @ dc_a))[None, :]
            jac_b = (self.sqrt_p * self.sign * (d @ dm_b + m @ dc_b))[None, :]

        if not jacobians:
            return Linearization(residual, {})
        blocks: dict[Key, np.ndarray] = {}
        if self.key_a is not None:
            blocks[self.key_a] = jac_a
        if self.key_b is not None:
            blocks[self.key_b] = blocks.get(self.key_b, 0.0) + jac_b
        return Linearization(residual, blocks)
