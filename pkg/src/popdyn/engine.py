"""Sequential feedback loop between allocations and learner parameters.

Each time step first updates allocations against the current parameters,
then updates learner parameters against the new allocations:

    alpha^{t+1} = nu(alpha^t, Theta^t)
    Theta^{t+1} = mu(alpha^{t+1}, Theta^t)

Because both halves are risk reducing, the total risk never increases; the
engine asserts this every step and aborts with a diagnostic if violated.
Component risks (per subpopulation, per learner) are recorded and are in
general not monotone.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .allocation import best_response_step, mwud_step
from .errors import MonotonicityError, PopdynError
from .learners import full_minimize, gradient_step, step_size
from .model import (
    EMPTY_MASS_TOL,
    MONOTONE_TOL,
    Scenario,
    SystemState,
    _total_risk,
    learner_risk_vector,
    renormalize_rows,
    subpop_risk_vector,
    validate_state,
)

SCHEDULE_KINDS = (
    "all_sequential",
    "round_robin_subpops",
    "round_robin_learners",
    "custom_order",
)


@dataclass(frozen=True)
class UpdateSchedule:
    """Which subpopulations and learners update at each time step.

    all_sequential updates everyone every step.  The round-robin kinds cycle
    one index (subpopulation or learner) per step through ``order`` while the
    other side updates fully.  custom_order updates the fixed subsets
    ``subpops`` and ``learners`` every step; each index may appear at most
    once per step.
    """

    kind: str = "all_sequential"
    order: Optional[tuple] = None
    subpops: Optional[tuple] = None
    learners: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        for name in ("order", "subpops", "learners"):
            val = getattr(self, name)
            if val is not None:
                val = tuple(int(i) for i in val)
                if len(set(val)) != len(val):
                    raise ValueError(f"schedule {name} repeats an index: {val}")
                object.__setattr__(self, name, val)


@dataclass(frozen=True)
class EquilibriumDetector:
    """Declare convergence after `window` consecutive steps with state deltas
    (max of infinity norms over alpha and Theta) at most state_tolerance."""

    state_tolerance: float = 1e-9
    window: int = 10

    def __post_init__(self):
        if self.state_tolerance <= 0:
            raise ValueError("state_tolerance must be > 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass
class Trajectory:
    """Recorded run: states plus per-step risk summaries.

    learner_risks entries are NaN wherever the learner was empty at that
    step (empty_flags marks them).  converged_at is the first index of the
    quiet window found by the detector, or None.
    """

    states: list
    total_risks: np.ndarray
    subpop_risks: np.ndarray
    learner_risks: np.ndarray
    empty_flags: np.ndarray
    converged_at: Optional[int] = None
    contract_checks: int = 0
    frozen_learner_steps: int = 0

    @property
    def final_state(self) -> SystemState:
        return self.states[-1]


def _subpop_subset(schedule: Optional[UpdateSchedule], t: int, n: int):
    if schedule is None or schedule.kind == "all_sequential":
        return None  # all rows
    if schedule.kind == "round_robin_subpops":
        order = schedule.order or tuple(range(n))
        return (order[t % len(order)],)
    if schedule.kind == "round_robin_learners":
        return None
    return schedule.subpops if schedule.subpops is not None else ()


def _learner_subset(schedule: Optional[UpdateSchedule], t: int, m: int):
    if schedule is None or schedule.kind == "all_sequential":
        return None  # all columns
    if schedule.kind == "round_robin_learners":
        order = schedule.order or tuple(range(m))
        return (order[t % len(order)],)
    if schedule.kind == "round_robin_subpops":
        return None
    return schedule.learners if schedule.learners is not None else ()


def _mwud_rows(alpha, R, gamma, comparison):
    # vectorized form of mwud_step applied to every row at once
    cost = gamma * R
    if comparison == "relative":
        mix = (alpha * R).sum(axis=1)
        if np.any(mix <= 0):
            raise ValueError("relative comparison needs positive mixture risks")
        cost = cost / mix[:, None]
    support = alpha > 0.0
    shift = np.where(support, cost, np.inf).min(axis=1)
    arg = np.clip(shift[:, None] - cost, None, 0.0)
    weights = np.where(support, alpha * np.exp(arg), 0.0)
    return weights / weights.sum(axis=1, keepdims=True)


def _update_alpha(alpha, R, scenario: Scenario, t: int):
    rule = scenario.subpop_rule
    rows = _subpop_subset(scenario.schedule, t, scenario.n)
    if rule.kind == "mwud" and rows is None:
        return _mwud_rows(alpha, R, rule.gamma, rule.comparison)
    new = alpha.copy()
    indices = range(scenario.n) if rows is None else rows
    for i in indices:
        if rule.kind == "mwud":
            prev_mix = None
            if rule.comparison == "relative":
                prev_mix = float((alpha[i] * R[i]).sum())
            new[i] = mwud_step(alpha[i], R[i], rule.gamma, rule.comparison,
                               prev_mix)
        else:
            new[i] = best_response_step(alpha[i], R[i], rule.tie_tolerance,
                                        rule.tie_policy)
    return new


def _update_theta(alpha, theta, scenario: Scenario, t: int):
    """Returns (theta', frozen_count).  Empty learners keep their parameter."""
    rule = scenario.learner_rule
    cols = _learner_subset(scenario.schedule, t, scenario.m)
    indices = tuple(range(scenario.m)) if cols is None else tuple(cols)
    if not indices:
        return theta, 0
    masses = scenario.beta @ alpha
    active = [j for j in indices if masses[j] >= EMPTY_MASS_TOL]
    frozen = len(indices) - len(active)
    if not active:
        return theta, frozen
    new = theta.copy()
    quad = scenario._quad
    if (rule.kind == "full_min" and rule.method == "closed_form_quadratic"
            and quad is not None):
        # batched weighted normal equations across all active learners
        A, _, _, Aphi = quad
        W = alpha[:, active] * scenario.beta[:, None]
        H = np.einsum("ij,ide->jde", W, A)
        b = W.T @ Aphi
        new[active, :] = np.linalg.solve(H, b[:, :, None])[:, :, 0]
        return new, frozen
    for j in active:
        if rule.kind == "full_min":
            new[j] = full_minimize(alpha[:, j], scenario.beta, scenario.risks,
                                   method=rule.method,
                                   tolerance=rule.tolerance,
                                   max_iterations=rule.max_iterations,
                                   start=theta[j])
        else:
            gamma_t = step_size(t, rule.schedule)
            th = theta[j]
            for _ in range(rule.inner_steps):
                th = gradient_step(th, alpha[:, j], scenario.beta,
                                   scenario.risks, gamma_t)
            new[j] = th
    return new, frozen


def _core_step(alpha, theta, t, scenario, R):
    """Advance one step; R must be the risk matrix at theta.

    Returns (alpha', theta', R', total_before, total_after, frozen_count);
    R' is the risk matrix at theta' for reuse by the caller.
    """
    total_before = _total_risk(alpha, R, scenario.beta)
    alpha2 = _update_alpha(alpha, R, scenario, t)
    theta2, frozen = _update_theta(alpha2, theta, scenario, t)
    R2 = R if theta2 is theta else scenario.risk_matrix(theta2)
    total_after = _total_risk(alpha2, R2, scenario.beta)
    if total_after > total_before + MONOTONE_TOL:
        raise MonotonicityError(t, total_before, total_after, MONOTONE_TOL)
    return alpha2, theta2, R2, total_before, total_after, frozen


def _check_contracts(alpha, alpha2, theta, theta2, scenario):
    """Debug-mode verification that both update halves were risk reducing."""
    from .allocation import verify_risk_reducing
    from .learners import verify_learner_risk_reducing

    checks = 0
    for i in range(scenario.n):
        if not np.array_equal(alpha[i], alpha2[i]):
            checks += 1
            if not verify_risk_reducing(scenario.subpop_rule, alpha[i],
                                        alpha2[i], theta, scenario.risks[i]):
                raise PopdynError(
                    f"allocation update for subpopulation {i} increased its risk"
                )
    masses = scenario.beta @ alpha2
    for j in range(scenario.m):
        if masses[j] >= EMPTY_MASS_TOL and not np.array_equal(theta[j], theta2[j]):
            checks += 1
            if not verify_learner_risk_reducing(theta[j], theta2[j],
                                                alpha2[:, j], scenario.beta,
                                                scenario.risks):
                raise PopdynError(
                    f"parameter update for learner {j} increased its risk"
                )
    return checks


def step(state: SystemState, scenario: Scenario,
         check_contracts: bool = False) -> SystemState:
    """One sequential update: allocations first, then learner parameters."""
    validate_state(state, scenario)
    R = scenario.risk_matrix(state.theta)
    alpha2, theta2, _, _, _, _ = _core_step(state.alpha, state.theta, state.t,
                                            scenario, R)
    if check_contracts:
        _check_contracts(state.alpha, alpha2, state.theta, theta2, scenario)
    return SystemState(alpha=renormalize_rows(alpha2), theta=theta2,
                       t=state.t + 1)


def state_delta(a: SystemState, b: SystemState) -> float:
    """max(||alpha_a - alpha_b||_inf, ||Theta_a - Theta_b||_inf)."""
    return max(
        float(np.abs(a.alpha - b.alpha).max()),
        float(np.abs(a.theta - b.theta).max()),
    )


def simulate(scenario: Scenario, initial_state: SystemState, max_steps: int,
             detector: Optional[EquilibriumDetector] = None,
             check_contracts: bool = False) -> Trajectory:
    """Run up to max_steps updates, stopping early once the detector fires."""
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    if detector is None:
        detector = EquilibriumDetector()
    validate_state(initial_state, scenario)
    beta = scenario.beta
    alpha = np.asarray(initial_state.alpha, dtype=float)
    theta = np.asarray(initial_state.theta, dtype=float)
    t0 = initial_state.t
    R = scenario.risk_matrix(theta)

    states = [SystemState(alpha=alpha, theta=theta, t=t0)]
    totals = [_total_risk(alpha, R, beta)]
    sub = [subpop_risk_vector(alpha, R)]
    lr, emp = learner_risk_vector(alpha, beta, R)
    learner = [lr]
    empties = [emp]
    contract_checks = 0
    frozen_total = 0

    quiet = 0
    for k in range(max_steps):
        alpha2, theta2, R2, _, total_after, frozen = _core_step(
            alpha, theta, t0 + k, scenario, R)
        if check_contracts:
            contract_checks += _check_contracts(alpha, alpha2, theta, theta2,
                                                scenario)
        alpha2 = renormalize_rows(alpha2)
        delta = max(float(np.abs(alpha2 - alpha).max()),
                    float(np.abs(theta2 - theta).max()))
        alpha, theta, R = alpha2, theta2, R2
        frozen_total += frozen
        states.append(SystemState(alpha=alpha, theta=theta, t=t0 + k + 1))
        totals.append(total_after)
        sub.append(subpop_risk_vector(alpha, R))
        lr, emp = learner_risk_vector(alpha, beta, R)
        learner.append(lr)
        empties.append(emp)
        quiet = quiet + 1 if delta <= detector.state_tolerance else 0
        if quiet >= detector.window:
            break

    traj = Trajectory(
        states=states,
        total_risks=np.array(totals),
        subpop_risks=np.array(sub),
        learner_risks=np.array(learner),
        empty_flags=np.array(empties),
        contract_checks=contract_checks,
        frozen_learner_steps=frozen_total,
    )
    traj.converged_at = detect_equilibrium(traj, detector)
    return traj


def detect_equilibrium(trajectory: Trajectory,
                       detector: EquilibriumDetector) -> Optional[int]:
    """First index where the state stops moving for a full detector window."""
    states = trajectory.states
    deltas = [state_delta(states[k], states[k + 1])
              for k in range(len(states) - 1)]
    quiet = 0
    for k, d in enumerate(deltas):
        quiet = quiet + 1 if d <= detector.state_tolerance else 0
        if quiet >= detector.window:
            return k - detector.window + 1
    return None


def perturb(state: SystemState, sigma: float, seed, target: str = "both") -> SystemState:
    """Seeded Gaussian perturbation of the targeted state components.

    Allocation rows receive noise magnitudes (|N(0, sigma)|), then are clipped
    and renormalized: magnitudes keep every share strictly positive, which the
    multiplicative dynamics need since they cannot revive an exactly-zero
    share.  Parameters receive signed Gaussian noise.  Deterministic in seed.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if target not in ("theta_only", "alpha_only", "both"):
        raise ValueError(f"unknown perturbation target {target!r}")
    if sigma == 0:
        return state
    rng = np.random.default_rng(seed)
    alpha = state.alpha
    theta = state.theta
    if target in ("alpha_only", "both"):
        noise = sigma * np.abs(rng.standard_normal(alpha.shape))
        alpha = renormalize_rows(alpha + noise)
    if target in ("theta_only", "both"):
        theta = theta + sigma * rng.standard_normal(theta.shape)
    return SystemState(alpha=alpha, theta=theta, t=state.t)


def _greedy_column_match(theta_a, theta_b):
    m = theta_a.shape[0]
    remaining = list(range(m))
    perm = []
    for j in range(m):
        k = min(remaining, key=lambda r: float(np.abs(theta_a[j] - theta_b[r]).max()))
        perm.append(k)
        remaining.remove(k)
    return tuple(perm)


def state_distance_upto_permutation(a: SystemState, b: SystemState) -> float:
    """State delta minimized over learner column relabelings.

    Exact minimization over all m! permutations for m <= 8; greedy
    parameter matching above that.
    """
    m = a.theta.shape[0]
    if m <= 8:
        perms = itertools.permutations(range(m))
    else:
        perms = [_greedy_column_match(a.theta, b.theta)]
    best = np.inf
    for p in perms:
        p = list(p)
        d = max(float(np.abs(a.alpha[:, p] - b.alpha).max()),
                float(np.abs(a.theta[p, :] - b.theta).max()))
        best = min(best, d)
    return best


def worker_count() -> int:
    """Worker pool size: POPDYN_THREADS if set, else machine parallelism."""
    env = os.environ.get("POPDYN_THREADS")
    if env is not None:
        count = int(env)
        if count < 1:
            raise ValueError(f"POPDYN_THREADS must be >= 1, got {env!r}")
        return count
    return os.cpu_count() or 1


def _probe_trial(scenario, eq_state, sigma, seed, target, max_steps,
                 return_tol, eq_risk, escape_tol):
    start = perturb(SystemState(eq_state.alpha, eq_state.theta, t=0), sigma,
                    seed, target)
    alpha = np.asarray(start.alpha, dtype=float)
    theta = np.asarray(start.theta, dtype=float)
    R = scenario.risk_matrix(theta)

    def perm_distance():
        return state_distance_upto_permutation(
            SystemState(alpha, theta, 0), eq_state)

    escaped = False
    for k in range(max_steps):
        alpha2, theta2, R2, _, total_after, _ = _core_step(
            alpha, theta, k, scenario, R)
        alpha2 = renormalize_rows(alpha2)
        delta = max(float(np.abs(alpha2 - alpha).max()),
                    float(np.abs(theta2 - theta).max()))
        alpha, theta, R = alpha2, theta2, R2
        # Total risk is monotone, so dropping below the equilibrium level is
        # irreversible: the run can never return once clearly below it.
        if total_after < eq_risk - escape_tol:
            escaped = True
        if escaped and perm_distance() > return_tol:
            return False
        if delta <= 1e-13:
            break
    return perm_distance() <= return_tol


def empirical_stability_probe(scenario: Scenario, eq_state: SystemState,
                              sigma: float, trials: int, seed: int,
                              target: str = "both", max_steps: int = 6000,
                              return_tol: float = 1e-4) -> float:
    """Perturb-and-resimulate: fraction of trials re-converging to eq_state.

    A trial counts as returned when it ends within return_tol of the
    equilibrium, compared up to learner permutation.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    validate_state(eq_state, scenario)
    R_eq = scenario.risk_matrix(eq_state.theta)
    eq_risk = _total_risk(eq_state.alpha, R_eq, scenario.beta)
    escape_tol = 1e-9 * max(1.0, abs(eq_risk))

    def run(k):
        return _probe_trial(scenario, eq_state, sigma, [seed, k], target,
                            max_steps, return_tol, eq_risk, escape_tol)

    workers = min(worker_count(), trials)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(trials)))
    else:
        results = [run(k) for k in range(trials)]
    return sum(results) / trials
