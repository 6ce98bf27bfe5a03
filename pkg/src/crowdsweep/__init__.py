"""Bilevel sweeping-process control for disk-confined crowd groups."""

from .geometry import (
    ConeSection,
    Disk,
    contact_jacobian,
    diamond,
    project_to_disk,
    sigma_support,
    truncated_normal_cone,
)
from .dynamics import (
    AffineDrift,
    BallSet,
    ControlProfile,
    FeasibilityReport,
    IntervalSet,
    ScaledLinearDrift,
    Scenario,
    SegmentSet,
    Trajectory,
    check_feasibility,
    cost_lower,
    cost_upper,
    h5_bounds,
    integrate_lower_catchup,
    integrate_lower_penalty,
    integrate_upper,
    uniform_grid,
)
from .bilevel import (
    BilevelSolution,
    CaseStudyParams,
    InnerOptions,
    closed_form_controls,
    penalized_objective,
    solve_bilevel_direct,
    solve_twodisk_parametric,
    value_function,
)
from .nco import (
    LowerMultipliers,
    NCOReport,
    UpperMultipliers,
    adjoint_residual,
    boundary_residual,
    fit_multipliers,
    hamiltonian_lower,
    hamiltonian_upper,
    max_condition_lower,
    max_condition_upper,
    verify,
)

__version__ = "0.1.0"
