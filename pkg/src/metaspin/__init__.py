"""Metastability of a driven collective spin with nonlinear dissipation.

Mean-field flow, the exact symmetric-sector Liouvillian, auxiliary
Hamiltonians derived from coherent-state symbols, and zero-energy instanton
barriers.
"""

from .model import (
    FixedPoint,
    FixedPointError,
    Magnetization,
    ModelParams,
    StereoPoint,
    bistability_onset,
    find_axis_fixed_points,
    fixed_point_map,
    from_stereo,
    integrate_mf,
    mf_jacobian,
    mf_rhs_cartesian,
    mf_rhs_stereo,
    to_stereo,
)
from .liouvillian import (
    EigenError,
    GapResult,
    PrecisionError,
    ReducedState,
    ResourceError,
    build_full_generator,
    build_reduced_generator,
    gap_estimator,
    liouvillian_gap,
    liouvillian_gap_report,
    magnetization_z,
    steady_state,
)
from .instanton import (
    BarrierTable,
    InstantonError,
    InstantonTrajectory,
    NotBistableError,
    OpenTrajectoryError,
    TraceOptions,
    TransitionError,
    action_of,
    activation_barriers,
    sw_barriers,
    trace_instanton,
    transition_point,
)
from .symham import derive_hamiltonian, k_matrix, verify_identities

__all__ = [name for name in dir() if not name.startswith("_")]
