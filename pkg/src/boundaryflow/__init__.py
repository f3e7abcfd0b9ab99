"""Gradient-flow machinery for the 1D Fokker-Planck equation with
prescribed positive boundary trace, built on boundary-reservoir transport.
"""

from .errors import (
    BoundaryFlowError,
    ConfigError,
    GridMismatch,
    GridTooCoarse,
    InfeasibleScheme,
    InvalidExponent,
    MassImbalance,
    NegativeDensity,
    NegativeInteriorMass,
    NonFiniteState,
    ParseError,
    PreconditionViolated,
    SolverDiverged,
)
from .functionals import EnergyRecord, energy, entropy, kr_norm, truncated_lq_norm
from .jko import (
    JkoConfig,
    StepResult,
    Trajectory,
    jko_step,
    run_scheme,
    scheme_equivalence_check,
    verify_step_optimality,
)
from .measures import (
    Grid,
    InteriorMeasure,
    PotentialData,
    SignedMeasure,
    balanced_measure,
    make_measure,
    potential_from_callables,
    read_measure,
    restrict_interior,
    sample_density,
    write_measure,
)
from .pde import FdConfig, FdResult, boundary_sobolev_norm, fd_solve, weak_form_residual
from .transport import (
    CostResult,
    TransportPlan,
    check_admissible,
    monotone_w2_cost,
    restricted_w2_optimality,
    t_cost,
    wb2,
    wb2_signed,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
