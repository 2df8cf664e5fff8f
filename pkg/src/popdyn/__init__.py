"""popdyn: multi-learner participation dynamics.

Subpopulations reallocate themselves among risk-minimizing learners, the
coupled system is simulated under risk-reducing update rules, and the
resulting fixed points are detected, classified (split-market / balanced),
stability-certified, and compared against a brute-force social-welfare
optimum.
"""

__version__ = "1.0.0"

from .allocation import (
    AllocationRule,
    best_response,
    best_response_step,
    mwud,
    mwud_step,
    verify_risk_reducing,
)
from .engine import (
    EquilibriumDetector,
    Trajectory,
    UpdateSchedule,
    detect_equilibrium,
    empirical_stability_probe,
    perturb,
    simulate,
    state_distance_upto_permutation,
    step,
)
from .equilibria import (
    EquilibriumReport,
    SplitAssignment,
    classify_state,
    convex_hulls_disjoint,
    enumerate_split_equilibria,
    example_c1_stability_predicate,
    potential_gradient,
    potential_value,
    split_learner,
    theta_for_assignment,
    welfare_gap,
)
from .errors import (
    BudgetError,
    ConvergenceError,
    DimensionError,
    EmptyLearnerError,
    MonotonicityError,
    NotOptimalError,
    PopdynError,
    ScenarioFormatError,
    SimplexError,
    SplitError,
    UnderflowError,
)
from .learners import (
    LearnerRule,
    StepSchedule,
    full_min,
    full_minimize,
    gradient_step,
    group_minimize,
    learner_gradient,
    repeated_gd,
    step_size,
    verify_learner_risk_reducing,
)
from .model import (
    RiskFunction,
    Scenario,
    SystemState,
    custom_risk,
    learner_avg_risk,
    learner_mass,
    quadratic_risk,
    risk_gradient,
    risk_hessian,
    risk_value,
    subpop_avg_risk,
    total_risk,
    validate_allocation,
    validate_state,
)
from .scenario_io import (
    SCHEMA_VERSION,
    LoadedScenario,
    load_scenario,
    load_state,
    parse_scenario,
    scenario_to_dict,
)

__all__ = [name for name in dir() if not name.startswith("_")]
