"""Truncated explicit integration for neutral stochastic delay equations.

Library surface: problem definitions and structural-condition probes
(`model`), the radial truncation mapping and level schedules (`truncation`),
reproducible Brownian grids with exact coarsening (`paths`), the one-step
recursion and its continuous-time versions (`scheme`), and the coupled-path
error / moment harness (`montecarlo`). The `mtem` console script drives it
all from configs.
"""

from .model import (
    Condition,
    ConditionProbeReport,
    NSDDEProblem,
    example1,
    example2,
    get_problem,
    probe_contractivity,
    probe_growth_g,
    probe_initial_modulus,
    probe_khasminskii,
    probe_local_lipschitz,
    problem_names,
)
from .montecarlo import (
    ErrorReport,
    MomentReport,
    SweepConfig,
    coupled_error_sweep,
    fit_loglog,
    fit_order,
    moment_sweep,
    strong_error_at_T,
    strong_error_sup,
)
from .paths import BrownianGrid, MeshSpec, brownian_value_at, coarsen, generate
from .scheme import (
    PathSolution,
    SimulationDivergedError,
    eval_interpolant,
    eval_piecewise,
    interpolant_on_fine_mesh,
    mtem_step,
    piecewise_on_fine_mesh,
    simulate_em,
    simulate_mtem,
)
from .truncation import (
    TruncationPolicy,
    check_admissibility,
    h_example1,
    h_example2,
    make_policy,
    policy_names,
    probe_trunc_khasminskii,
    probe_trunc_lipschitz,
    truncate,
    truncated_coefficients,
)

__all__ = [
    "BrownianGrid",
    "Condition",
    "ConditionProbeReport",
    "ErrorReport",
    "MeshSpec",
    "MomentReport",
    "NSDDEProblem",
    "PathSolution",
    "SimulationDivergedError",
    "SweepConfig",
    "TruncationPolicy",
    "brownian_value_at",
    "check_admissibility",
    "coarsen",
    "coupled_error_sweep",
    "eval_interpolant",
    "eval_piecewise",
    "example1",
    "example2",
    "fit_loglog",
    "fit_order",
    "generate",
    "get_problem",
    "h_example1",
    "h_example2",
    "interpolant_on_fine_mesh",
    "make_policy",
    "moment_sweep",
    "mtem_step",
    "piecewise_on_fine_mesh",
    "policy_names",
    "probe_contractivity",
    "probe_growth_g",
    "probe_initial_modulus",
    "probe_khasminskii",
    "probe_local_lipschitz",
    "probe_trunc_khasminskii",
    "probe_trunc_lipschitz",
    "problem_names",
    "simulate_em",
    "simulate_mtem",
    "strong_error_at_T",
    "strong_error_sup",
    "truncate",
    "truncated_coefficients",
]
