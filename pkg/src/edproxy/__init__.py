"""Feasible optimization proxies for economic dispatch with reserves."""

from ._kernels import BACKEND, HAS_NUMBA
from .core import (
    DispatchSolution,
    EDInstance,
    FeasibilityReport,
    check_feasibility,
    objective_value,
    penalized_objective,
    reserve_shortage,
    solve_reference,
    thermal_violations,
)
from .grid import (
    CaseFormatError,
    CaseValidationError,
    SystemCase,
    case_from_snapshot,
    case_to_snapshot,
    compute_ptdf,
    load_case,
    normalize_case,
    parse_case,
)
from .projection import ProjectionConvergenceError, project_feasible_edr, project_hypersimplex
from .repair import (
    Certificate,
    LayerJacobianHandle,
    RepairContext,
    RepairContractError,
    feasibility_certificate,
    generalized_simplex_repair,
    power_balance_repair,
    power_balance_vjp,
    recover_reserves,
    reserve_repair,
    reserve_repair_vjp,
)

__version__ = "0.1.0"
