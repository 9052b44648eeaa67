//! Numerical toolkit for deterministic team decision problems: several
//! decision makers steer one differential (or multistage) system, each
//! restricted to strategies measurable with respect to its own information,
//! and the team minimizes a single cost.
//!
//! The crate provides
//! - problem containers for general nonlinear dynamics ([`TeamProblem`]),
//!   linear-quadratic data ([`LqData`]), drift-plus-input-affine data
//!   ([`GnfData`]), and multistage systems ([`DiscreteTeamProblem`]),
//! - forward, adjoint, and variational sweeps on uniform grids
//!   ([`integrate_forward`], [`integrate_adjoint`], [`integrate_variational`]),
//! - information restrictions as weighted least-squares projections onto
//!   feature spans ([`InfoSpec`], [`InfoSubspace`]),
//! - stationarity residuals, joint and block-cyclic projected-gradient
//!   solvers ([`solve_team`], [`solve_pbp`]), a damped fixed-point solver for
//!   decentralized linear-quadratic teams ([`solve_decentralized_lq`]), and a
//!   sampled convexity certificate ([`sufficiency_certificate`]).

// solver loops walk decision-maker and node indices across parallel arrays,
// where the indexed form reads better than zipped iterators
#![allow(clippy::needless_range_loop)]

pub mod builtins;
pub mod discrete;
pub mod error;
mod fd;
pub mod grid;
pub mod hamiltonian;
pub mod infostruct;
pub mod integrate;
pub mod lq;
pub mod model;
pub mod team_solver;

pub use builtins::{find_builtin, Builtin, BuiltinKind, BUILTINS};
pub use discrete::{
    discrete_adjoint, discrete_control_gradients, discrete_cost, discrete_forward,
    discrete_solve_team, discrete_stationarity_residual, DiscreteStationarity, DiscreteTeamBuilder,
    DiscreteTeamProblem,
};
pub use error::{Error, Result};
pub use grid::{TimeGrid, DEFAULT_STEPS_PER_UNIT};
pub use hamiltonian::{eval_hamiltonian, hamiltonian_value, HamiltonianEval};
pub use infostruct::{
    build_subspace, project, weighted_inner, weighted_norm, BasisFn, FeatureFn, InfoSpec,
    InfoSubspace, SpanBasis,
};
pub use integrate::{integrate_adjoint, integrate_forward, integrate_variational};
pub use lq::{
    adjoint_representation, gnf_strategy_update, solve_beta, solve_decentralized_lq, solve_sigma,
    AdjointRep, GnfBuilder, GnfData, LqBuilder, LqData,
};
pub use model::{
    validate_problem, BoxSet, ObservationFn, TeamProblem, TeamProblemBuilder, Trajectory,
    ValidateOptions, ValidationIssue, ValidationReport,
};
pub use team_solver::{
    evaluate_cost, solve_pbp, solve_team, stationarity_residual, sufficiency_certificate,
    DmStrategy, SolveOptions, SolveReport, StationarityReport, StrategyProfile,
    SufficiencyCertificate,
};
