"""Energy-sharing market equilibria and decentralized price dynamics.

Computes the competitive equilibrium of a quadratic-utility energy-sharing
market, the minimum-adjustment equilibrium under a social price cap, and
simulates the decentralized primal-dual dynamics together with the dynamic
feedback controller that steers the market to the capped equilibrium.
"""

from .errors import (
    DimensionMismatch,
    EmptyMarket,
    EnergyShareError,
    InconsistentDual,
    MissingField,
    NegativeGeneration,
    NegativeMu,
    NonfiniteInput,
    NonfiniteState,
    NonpositiveCurvature,
    ParseError,
    ValidationError,
)
from .market import (
    AgentParams,
    MarketInstance,
    MarketWarning,
    SocialPriceCap,
    conditional_projection,
    phi,
    utility,
    validate_market,
)
from .equilibrium import (
    CeSolution,
    KktResidualReport,
    ModifiedPrimalSolution,
    SceSolution,
    aggregate_slack,
    change_of_variables_matrix,
    dual_to_primal_sw,
    kkt_residual_sce,
    lcp_oracle,
    map_sce_to_modified_primal,
    solve_ce,
    solve_modified_primal,
    solve_scalar_lcp,
    solve_sce,
    solve_sw_dual,
)
from .dynamics import (
    ClosedLoopState,
    ConvergenceReport,
    StabilityCertificate,
    StateLayout,
    Trajectory,
    affine_rhs,
    assemble_equilibrium,
    closed_loop_decay_rate,
    closed_loop_dim,
    closed_loop_matrices,
    closed_loop_rhs,
    convergence_report,
    integrate,
    lyapunov_value,
    open_loop_equilibrium,
    open_loop_matrices,
    reduced_equilibrium,
    reduced_matrices,
    rhs_closed_loop,
    rhs_controlled,
    rhs_controller,
    rhs_open_loop,
    rhs_reduced,
    stability_certificate,
    state_layout,
)
from .scenario import (
    EquilibriumReport,
    ScenarioConfig,
    SimSettings,
    SweepRow,
    config_to_json,
    dumps_canonical,
    load_config,
    nominal_welfare,
    report_to_json,
    run_simulate,
    run_solve,
    run_sweep,
    sweep_to_csv,
    trajectory_header,
    write_trajectory_csv,
)
from .verification import CheckResult, VerificationReport, random_market, run_verify

__version__ = "0.1.0"

__all__ = [
    "AgentParams",
    "CeSolution",
    "CheckResult",
    "ClosedLoopState",
    "ConvergenceReport",
    "DimensionMismatch",
    "EmptyMarket",
    "EnergyShareError",
    "EquilibriumReport",
    "InconsistentDual",
    "KktResidualReport",
    "MarketInstance",
    "MarketWarning",
    "MissingField",
    "ModifiedPrimalSolution",
    "NegativeGeneration",
    "NegativeMu",
    "NonfiniteInput",
    "NonfiniteState",
    "NonpositiveCurvature",
    "ParseError",
    "ScenarioConfig",
    "SceSolution",
    "SimSettings",
    "SocialPriceCap",
    "StabilityCertificate",
    "StateLayout",
    "SweepRow",
    "Trajectory",
    "ValidationError",
    "VerificationReport",
    "affine_rhs",
    "aggregate_slack",
    "assemble_equilibrium",
    "change_of_variables_matrix",
    "closed_loop_decay_rate",
    "closed_loop_dim",
    "closed_loop_matrices",
    "closed_loop_rhs",
    "conditional_projection",
    "config_to_json",
    "convergence_report",
    "dual_to_primal_sw",
    "dumps_canonical",
    "integrate",
    "kkt_residual_sce",
    "lcp_oracle",
    "load_config",
    "lyapunov_value",
    "map_sce_to_modified_primal",
    "nominal_welfare",
    "open_loop_equilibrium",
    "open_loop_matrices",
    "phi",
    "random_market",
    "reduced_equilibrium",
    "reduced_matrices",
    "report_to_json",
    "rhs_closed_loop",
    "rhs_controlled",
    "rhs_controller",
    "rhs_open_loop",
    "rhs_reduced",
    "run_simulate",
    "run_solve",
    "run_sweep",
    "run_verify",
    "solve_ce",
    "solve_modified_primal",
    "solve_scalar_lcp",
    "solve_sce",
    "solve_sw_dual",
    "stability_certificate",
    "state_layout",
    "sweep_to_csv",
    "trajectory_header",
    "utility",
    "validate_market",
    "write_trajectory_csv",
]
