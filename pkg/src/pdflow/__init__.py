"""Continuous-time primal-dual dynamics with diagonal filter banks.

Simulates projected primal-dual flows for convex programs, certifies
passivity and Lyapunov decay along trajectories, and cross-checks the
augmented-Lagrangian special cases against the general filter form.
"""

from .problems import (
    BUILTIN_NAMES,
    ConvexProblem,
    DimensionMismatch,
    KktPoint,
    KktResidual,
    OracleValueError,
    builtin_problem,
    builtin_reference,
    distributed_lift,
    kkt_residual,
    make_lp,
    make_quadratic,
    make_toy,
    monotone_gradient_check,
)
from .filters import (
    FilterBank,
    FilterSpec,
    filter_derivative,
    filter_output,
    has_stable_zero,
    project_rhs,
    recombine,
    require_valid,
    validate,
)
from .engine import (
    DynamicsSystem,
    IntegrationError,
    IntegratorConfig,
    LoopDivergence,
    NoiseModel,
    NoiseStream,
    ResolvedSignals,
    SolverState,
    Trajectory,
    assemble,
    equilibrium_state,
    integrate,
    resolve_outputs,
    rhs,
    trajectory_to_csv,
    trajectory_to_json,
)
from .certify import (
    AuditReport,
    ConvergenceReport,
    ReferencePoint,
    StorageBreakdown,
    StorageSeries,
    attach_storage,
    convergence_report,
    lyapunov_monotone,
    passivity_audit,
    storage_values,
)
from .variants import (
    DirectTrajectory,
    VARIANTS,
    as_generalized,
    aug_lagrangian_rhs,
    direct_to_solver_state,
    integrate_direct,
    richert_cortes_rhs,
    trajectory_divergence,
)

__version__ = "0.1.0"
