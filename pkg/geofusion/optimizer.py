"""Factor graph container and Levenberg-Marquardt solver over SE(3) variables."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from typing import Hashable, Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .const import (
    DEFAULT_CONVERGENCE_TOL,
    DEFAULT_GAUGE_SIGMA,
    DEFAULT_GRADIENT_TOL,
    DEFAULT_LAMBDA_INIT,
    DEFAULT_LAMBDA_RANGE,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_MEAS_SIGMA_ROT,
    DEFAULT_MEAS_SIGMA_TRANS,
    DEFAULT_ODOM_SIGMA_ROT,
    DEFAULT_ODOM_SIGMA_TRANS,
    DEFAULT_OMEGA_P,
    DEFAULT_OMEGA_Q,
    DEFAULT_PRIOR_SIGMA_ROT,
    DEFAULT_PRIOR_SIGMA_TRANS,
    DEFAULT_STAGE1_EVERY,
    DEFAULT_STAGE2_EVERY,
)
from .exceptions import ConfigError, NotConverged, SingularSystem
from .factors import Factor, diagonal_covariance
from .geometry import Pose

_LOGGER = logging.getLogger(__name__)

STATE_DIM = 6
_DIAG_FLOOR = 1e-12

Key = Hashable


def robot_key(t: int) -> tuple[str, int]:
    return ("x", t)


def object_key(object_id: int) -> tuple[str, int]:
    return ("o", object_id)


@dataclass(frozen=True, eq=False)
class SolverConfig:
    """Solver behaviour, factor weights and optimization cadence."""

    max_iterations: int = DEFAULT_MAX_ITERATIONS
    lambda_init: float = DEFAULT_LAMBDA_INIT
    lambda_range: tuple[float, float] = DEFAULT_LAMBDA_RANGE
    convergence_tol: float = DEFAULT_CONVERGENCE_TOL
    gradient_tol: float = DEFAULT_GRADIENT_TOL
    omega_p: float = DEFAULT_OMEGA_P
    omega_q: float = DEFAULT_OMEGA_Q
    q_odom: np.ndarray = field(
        default_factory=lambda: diagonal_covariance(DEFAULT_ODOM_SIGMA_ROT, DEFAULT_ODOM_SIGMA_TRANS)
    )
    r_meas: np.ndarray = field(
        default_factory=lambda: diagonal_covariance(DEFAULT_MEAS_SIGMA_ROT, DEFAULT_MEAS_SIGMA_TRANS)
    )
    stage1_every: int = DEFAULT_STAGE1_EVERY
    stage2_every: int = DEFAULT_STAGE2_EVERY
    gauge_sigma: float = DEFAULT_GAUGE_SIGMA
    prior_sigma: tuple[float, float] = (DEFAULT_PRIOR_SIGMA_ROT, DEFAULT_PRIOR_SIGMA_TRANS)
    strict: bool = False

    def __post_init__(self) -> None:
        """Validate weights, tolerances and cadences."""
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if min(self.omega_p, self.omega_q, self.lambda_init, self.convergence_tol, self.gauge_sigma) <= 0.0:
            raise ConfigError("Solver weights, damping and tolerances must be > 0")
        if min(self.prior_sigma) <= 0.0:
            raise ConfigError("prior_sigma must be > 0")
        if self.stage1_every < 1 or self.stage2_every < 1:
            raise ConfigError("Optimization cadences must be >= 1")
        lo, hi = self.lambda_range
        if not 0.0 < lo < hi:
            raise ConfigError("lambda_range must satisfy 0 < lo < hi")
        for name in ("q_odom", "r_meas"):
            matrix = np.asarray(getattr(self, name), dtype=float)
            if matrix.shape != (6, 6) or not np.allclose(matrix, matrix.T):
                raise ConfigError(f"{name} must be a symmetric 6x6 matrix")
            if np.linalg.eigvalsh(matrix).min() <= 0.0:
                raise ConfigError(f"{name} must be positive definite")
            object.__setattr__(self, name, matrix)


@dataclass
class SolveResult:
    """Outcome of one solve."""

    values: dict[Key, Pose]
    cost: float
    initial_cost: float
    iterations: int
    converged: bool


class FactorGraph:
    """Pose variables, the subset held constant, and the factors over them."""

    def __init__(self) -> None:
        self.values: dict[Key, Pose] = {}
        self.fixed: set[Key] = set()
        self.factors: list[Factor] = []

    def add_variable(self, key: Key, initial: Pose, fixed: bool = False) -> None:
        self.values[key] = initial
        if fixed:
            self.fixed.add(key)
        else:
            self.fixed.discard(key)

    def add_factor(self, factor: Factor) -> None:
        """Register a factor; every key it touches must already be a variable."""
        missing = [k for k in factor.keys if k not in self.values]
        if missing:
            raise KeyError(f"Factor references unknown variables {missing}")
        self.factors.append(factor)

    def add_factors(self, factors: Iterable[Factor]) -> None:
        for factor in factors:
            self.add_factor(factor)

    @property
    def free_keys(self) -> list[Key]:
        """Non-fixed keys touched by at least one factor, in insertion order."""
        used = {k for f in self.factors for k in f.keys}
        return [k for k in self.values if k in used and k not in self.fixed]

    def cost(self, values: dict[Key, Pose] | None = None) -> float:
        values = self.values if values is None else values
        return float(sum(f.cost(values) for f in self.factors))

    def __len__(self) -> int:
        return len(self.factors)


def _build_system(
    graph: FactorGraph, values: dict[Key, Pose], index: dict[Key, int]
) -> tuple[sp.csc_matrix, np.ndarray, float]:
    """Gauss-Newton normal equations H = J^T J, g = J^T r, and the cost."""
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    data: list[np.ndarray] = []
    residuals: list[np.ndarray] = []
    offset = 0
    for factor in graph.factors:
        lin = factor.linearize(values)
        dim = len(lin.residual)
        residuals.append(lin.residual)
        for key, jac in lin.jacobians.items():
            col0 = index.get(key)
            if col0 is None:
                continue
            r_idx, c_idx = np.meshgrid(np.arange(dim) + offset, np.arange(STATE_DIM) + col0, indexing="ij")
            rows.append(r_idx.ravel())
            cols.append(c_idx.ravel())
            data.append(np.asarray(jac, dtype=float).reshape(dim, STATE_DIM).ravel())
        offset += dim

    r = np.concatenate(residuals) if residuals else np.zeros(0)
    n = STATE_DIM * len(index)
    if data:
        jac = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(offset, n))
    else:
        jac = sp.coo_matrix((offset, n))
    jac = jac.tocsr()
    return (jac.T @ jac).tocsc(), jac.T @ r, 0.5 * float(r @ r)


def _retract(values: dict[Key, Pose], index: dict[Key, int], delta: np.ndarray) -> dict[Key, Pose]:
    updated = dict(values)
    for key, col0 in index.items():
        updated[key] = values[key].retract(delta[col0 : col0 + STATE_DIM])
    return updated


def solve(graph: FactorGraph, cfg: SolverConfig) -> SolveResult:
    """Levenberg-Marquardt with Marquardt diagonal damping.

    Accepted steps never increase the cost. Raises SingularSystem when no finite
    step exists even at maximum damping, and NotConverged (carrying the best
    result) when `cfg.strict` is set and the iteration budget runs out.
    """
    keys = graph.free_keys
    index = {key: i * STATE_DIM for i, key in enumerate(keys)}
    values = dict(graph.values)
    initial_cost = graph.cost(values)
    if not keys:
        return SolveResult(values, initial_cost, initial_cost, 0, True)

    lam = cfg.lambda_init
    lam_min, lam_max = cfg.lambda_range
    cost = initial_cost
    converged = False
    iterations = 0

    while iterations < cfg.max_iterations:
        iterations += 1
        hessian, gradient, cost = _build_system(graph, values, index)
        if not np.all(np.isfinite(gradient)):
            raise SingularSystem("Non-finite gradient while linearizing")
        if np.max(np.abs(gradient)) < cfg.gradient_tol:
            converged = True
            break

        damping_base = np.maximum(hessian.diagonal(), _DIAG_FLOOR)
        improved = False
        finite_step = False
        while lam <= lam_max:
            damped = (hessian + sp.diags(lam * damping_base, format="csc")).tocsc()
            delta = np.atleast_1d(spsolve(damped, -gradient))
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            finite_step = True
            candidate = _retract(values, index, delta)
            new_cost = graph.cost(candidate)
            if new_cost < cost:
                decrease = (cost - new_cost) / max(cost, np.finfo(float).tiny)
                values, previous, cost = candidate, cost, new_cost
                lam = max(lam / 10.0, lam_min)
                improved = True
                _LOGGER.debug(
                    "LM iteration %d: cost %.6g -> %.6g, lambda %.1e, |delta| %.3g",
                    iterations,
                    previous,
                    new_cost,
                    lam,
                    float(np.linalg.norm(delta)),
                )
                if decrease < cfg.convergence_tol or float(np.linalg.norm(delta)) < 1e-14:
                    converged = True
                break
            lam *= 10.0

        if converged:
            break
        if not improved:
            if not finite_step:
                raise SingularSystem("Normal equations could not be solved at maximum damping")
            # no descent direction left at maximum damping
            converged = True
            break

    result = SolveResult(values, cost, initial_cost, iterations, converged)
    if not converged:
        message = f"LM stopped after {iterations} iterations at cost {cost:.6g}"
        if cfg.strict:
            raise NotConverged(message, result)
        _LOGGER.warning(message)
    return result
