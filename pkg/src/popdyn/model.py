"""Problem instances and risk aggregates.

A subpopulation is represented directly by its risk function R_i over the
shared parameter space R^d; a learner by the parameter vector theta_j it
currently serves.  Participation is an n x m row-stochastic matrix alpha.
Three aggregates drive everything else:

    subpop average   sum_j alpha_ij R_i(theta_j)
    learner average  sum_i alpha_ij beta_i R_i(theta_j) / sum_i alpha_ij beta_i
    total risk       sum_ij beta_i alpha_ij R_i(theta_j)

All types are immutable after construction; the operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, TYPE_CHECKING

import numpy as np

from .errors import DimensionError, EmptyLearnerError, SimplexError

if TYPE_CHECKING:  # rule configs live with their dynamics modules
    from .allocation import AllocationRule
    from .learners import LearnerRule
    from .engine import UpdateSchedule

# Simplex tolerance: rows are renormalized after every allocation update,
# so drift beyond this indicates a bug rather than accumulated rounding.
SIMPLEX_TOL = 1e-10
# A learner whose user mass sum_i alpha_ij beta_i falls below this is "empty".
EMPTY_MASS_TOL = 1e-12
# Permitted per-step increase of the total risk (floating-point slack only).
MONOTONE_TOL = 1e-8


def _as_vector(x, d, name) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != (d,):
        raise DimensionError(f"{name}: expected shape ({d},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class RiskFunction:
    """Strongly convex per-subpopulation risk.

    ``quadratic`` kind evaluates (theta-center)^T curvature (theta-center)
    + offset with a symmetric positive-definite curvature matrix.  The
    ``custom`` kind delegates to user callbacks (value, gradient, hessian)
    that must themselves be strongly convex.
    """

    kind: str
    dim: int
    center: Optional[np.ndarray] = None
    curvature: Optional[np.ndarray] = None
    offset: float = 0.0
    value_fn: Optional[Callable] = field(default=None, repr=False)
    grad_fn: Optional[Callable] = field(default=None, repr=False)
    hess_fn: Optional[Callable] = field(default=None, repr=False)


def quadratic_risk(center, curvature=None, offset: float = 0.0) -> RiskFunction:
    """Build a quadratic risk with center phi, SPD curvature A and offset c."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = center.shape[0]
    if curvature is None:
        curvature = np.eye(d)
    curvature = np.asarray(curvature, dtype=float)
    if curvature.shape != (d, d):
        raise DimensionError(
            f"curvature: expected shape ({d},{d}), got {curvature.shape}"
        )
    if not np.allclose(curvature, curvature.T, atol=1e-10):
        raise ValueError("curvature matrix must be symmetric")
    eigs = np.linalg.eigvalsh(curvature)
    if eigs.min() <= 0:
        raise ValueError(f"curvature must be positive definite, eigmin={eigs.min()}")
    if offset < 0:
        raise ValueError(f"offset must be >= 0, got {offset}")
    center = center.copy()
    center.setflags(write=False)
    curvature = curvature.copy()
    curvature.setflags(write=False)
    return RiskFunction(
        kind="quadratic", dim=d, center=center, curvature=curvature,
        offset=float(offset),
    )


def custom_risk(dim: int, value, gradient, hessian) -> RiskFunction:
    """Build a risk from callbacks; caller guarantees strong convexity."""
    return RiskFunction(
        kind="custom", dim=int(dim),
        value_fn=value, grad_fn=gradient, hess_fn=hessian,
    )


def risk_value(risk: RiskFunction, theta) -> float:
    """R_i(theta); exact (theta-phi)^T A (theta-phi) + c for quadratics."""
    theta = _as_vector(theta, risk.dim, "theta")
    if risk.kind == "quadratic":
        diff = theta - risk.center
        return float(diff @ risk.curvature @ diff) + risk.offset
    return float(risk.value_fn(theta))


def risk_gradient(risk: RiskFunction, theta) -> np.ndarray:
    """grad R_i(theta); 2 A (theta-phi) for quadratics."""
    theta = _as_vector(theta, risk.dim, "theta")
    if risk.kind == "quadratic":
        return 2.0 * (risk.curvature @ (theta - risk.center))
    return np.asarray(risk.grad_fn(theta), dtype=float)


def risk_hessian(risk: RiskFunction, theta) -> np.ndarray:
    """Hessian of R_i at theta; the constant 2A for quadratics."""
    theta = _as_vector(theta, risk.dim, "theta")
    if risk.kind == "quadratic":
        return 2.0 * risk.curvature
    return np.asarray(risk.hess_fn(theta), dtype=float)


@dataclass(frozen=True)
class Scenario:
    """Immutable problem instance.

    beta holds the population proportions (positive, summing to one), one
    risk function per subpopulation, and the update-rule configuration that
    the engine uses.  ``schedule=None`` means all subpopulations and all
    learners update every step.
    """

    beta: np.ndarray
    risks: tuple
    m: int
    subpop_rule: "AllocationRule"
    learner_rule: "LearnerRule"
    schedule: Optional["UpdateSchedule"] = None

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).copy()
        if beta.ndim != 1:
            raise DimensionError("beta must be a vector")
        if np.any(beta <= 0):
            raise ValueError("all population proportions must be positive")
        if abs(beta.sum() - 1.0) > 1e-12:
            raise ValueError(
                f"population proportions must sum to 1 within 1e-12, sum={beta.sum()!r}"
            )
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        risks = tuple(self.risks)
        object.__setattr__(self, "risks", risks)
        if len(risks) != beta.shape[0]:
            raise DimensionError(
                f"{len(risks)} risk functions for {beta.shape[0]} proportions"
            )
        dims = {r.dim for r in risks}
        if len(dims) != 1:
            raise DimensionError(f"risk functions disagree on dimension: {dims}")
        if not (1 <= self.m <= beta.shape[0]):
            raise ValueError(
                f"need 1 <= m <= n, got m={self.m}, n={beta.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.beta.shape[0]

    @property
    def d(self) -> int:
        return self.risks[0].dim

    @cached_property
    def _quad(self):
        """Stacked (A, phi, c, A@phi) arrays when every risk is quadratic."""
        if any(r.kind != "quadratic" for r in self.risks):
            return None
        A = np.stack([r.curvature for r in self.risks])
        phi = np.stack([r.center for r in self.risks])
        c = np.array([r.offset for r in self.risks])
        return A, phi, c, np.einsum("nde,ne->nd", A, phi)

    def risk_matrix(self, theta: np.ndarray) -> np.ndarray:
        """Matrix R with R[i, j] = R_i(theta_j) for theta of shape (m, d)."""
        theta = np.asarray(theta, dtype=float)
        if self._quad is not None:
            A, phi, c, _ = self._quad
            diff = theta[None, :, :] - phi[:, None, :]
            return np.einsum("nmd,nde,nme->nm", diff, A, diff) + c[:, None]
        return np.array(
            [[risk_value(r, th) for th in theta] for r in self.risks]
        )

    def centers(self) -> np.ndarray:
        """Per-subpopulation optimal parameters (quadratic scenarios only)."""
        if self._quad is None:
            raise ValueError("centers are only defined for quadratic risks")
        return self._quad[1]


def validate_allocation(alpha, n: int, m: int, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Check alpha is an n x m row-stochastic matrix; returns it as float array."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (n, m):
        raise DimensionError(f"alpha: expected shape ({n},{m}), got {alpha.shape}")
    if np.any(alpha < -tol) or np.any(alpha > 1 + tol):
        i, j = np.unravel_index(
            np.argmax(np.abs(alpha - np.clip(alpha, 0, 1))), alpha.shape
        )
        raise SimplexError(f"alpha[{i},{j}]={alpha[i, j]!r} outside [0,1]")
    sums = alpha.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        i = int(np.argmax(np.abs(sums - 1.0)))
        raise SimplexError(f"row {i} sums to {sums[i]!r}, expected 1 within {tol}")
    return alpha


def renormalize_rows(alpha: np.ndarray) -> np.ndarray:
    """Clip to nonnegative and rescale each row to sum exactly one."""
    clipped = np.clip(alpha, 0.0, None)
    return clipped / clipped.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class SystemState:
    """Joint state (alpha, Theta) at time step t."""

    alpha: np.ndarray
    theta: np.ndarray
    t: int = 0

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).copy()
        theta = np.asarray(self.theta, dtype=float).copy()
        if theta.ndim != 2:
            raise DimensionError("theta must have shape (m, d)")
        alpha.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "theta", theta)


def validate_state(state: SystemState, scenario: Scenario) -> None:
    """Check state dimensions and allocation invariants against the scenario."""
    validate_allocation(state.alpha, scenario.n, scenario.m)
    if state.theta.shape != (scenario.m, scenario.d):
        raise DimensionError(
            f"theta: expected shape ({scenario.m},{scenario.d}), "
            f"got {state.theta.shape}"
        )


def subpop_avg_risk(alpha_row, theta_all, risk: RiskFunction) -> float:
    """Average risk sum_j alpha_ij R_i(theta_j) experienced by one subpopulation."""
    alpha_row = np.asarray(alpha_row, dtype=float)
    theta_all = np.asarray(theta_all, dtype=float)
    if alpha_row.shape[0] != theta_all.shape[0]:
        raise DimensionError(
            f"{alpha_row.shape[0]} allocations for {theta_all.shape[0]} learners"
        )
    if np.any(alpha_row < -SIMPLEX_TOL) or abs(alpha_row.sum() - 1.0) > SIMPLEX_TOL:
        raise SimplexError(f"allocation row not on simplex: {alpha_row!r}")
    return float(sum(
        a * risk_value(risk, th) for a, th in zip(alpha_row, theta_all) if a != 0.0
    ))


def learner_mass(alpha_col, beta) -> float:
    """User mass sum_i alpha_ij beta_i observed by one learner."""
    return float(np.asarray(alpha_col, dtype=float) @ np.asarray(beta, dtype=float))


def learner_avg_risk(alpha_col, beta, risks, theta_j) -> float:
    """Mass-normalized mixture risk observed by one learner.

    Invariant to positive rescaling of alpha_col; raises EmptyLearnerError
    when the mass falls below EMPTY_MASS_TOL rather than dividing by ~0.
    """
    alpha_col = np.asarray(alpha_col, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if alpha_col.shape != beta.shape or alpha_col.shape[0] != len(risks):
        raise DimensionError("alpha_col, beta and risks must have equal length")
    w = alpha_col * beta
    mass = w.sum()
    if mass < EMPTY_MASS_TOL:
        raise EmptyLearnerError(f"learner mass {mass!r} below {EMPTY_MASS_TOL}")
    total = sum(
        wi * risk_value(r, theta_j) for wi, r in zip(w, risks) if wi != 0.0
    )
    return float(total / mass)


def _total_risk(alpha: np.ndarray, R: np.ndarray, beta: np.ndarray) -> float:
    # R is the precomputed risk matrix R[i,j] = R_i(theta_j)
    return float(beta @ (alpha * R).sum(axis=1))


def total_risk(state: SystemState, scenario: Scenario) -> float:
    """Total risk sum_ij beta_i alpha_ij R_i(theta_j), the dynamics' potential."""
    validate_state(state, scenario)
    R = scenario.risk_matrix(state.theta)
    return _total_risk(state.alpha, R, scenario.beta)


def subpop_risk_vector(alpha: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Per-subpopulation average risks from a precomputed risk matrix."""
    return (alpha * R).sum(axis=1)


def learner_risk_vector(alpha, beta, R):
    """Per-learner mixture risks; empty learners yield NaN plus a flag array."""
    w = alpha * beta[:, None]
    masses = w.sum(axis=0)
    empty = masses < EMPTY_MASS_TOL
    vals = np.full(alpha.shape[1], np.nan)
    ok = ~empty
    vals[ok] = (w[:, ok] * R[:, ok]).sum(axis=0) / masses[ok]
    return vals, empty
