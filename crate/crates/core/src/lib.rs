//! Pathwise-robust nonlinear filtering on level-2 rough observation paths.
//!
//! The library evaluates conditional expectations of a partially observed
//! diffusion as a *continuous* functional of the observation record. When the
//! signal shares driving noise with a multidimensional observation, no such
//! functional exists on plain path space; it does exist once the observation
//! is enhanced with its Lévy area. The pieces:
//!
//! * [`rough_path`] — discretely sampled level-2 rough paths over `R^d`:
//!   piecewise-linear lifts, geodesic interpolation, Hölder seminorms and the
//!   inhomogeneous rough-path distance.
//! * [`flow`] — the ODE flow driven by a rough path, its inverse and space
//!   derivatives, and the coefficient transform that removes the rough term
//!   from an SDE.
//! * [`sde`] — SDEs with a rough drift term, solved through the flow
//!   decomposition, plus the assembly of the filtering system
//!   `(X, Y, I)` from model coefficients.
//! * [`estimator`] — Monte Carlo evaluation of the robust filter functionals
//!   `g^f`, `g^1` and their ratio `theta`, with delta-method errors.
//! * [`reference`] — independent oracles: a closed-form two-observation
//!   example, the classical integration-by-parts weight for uncorrelated
//!   noise, and a weighted particle filter.
//! * [`models`] — the built-in model catalog and an expression grammar for
//!   inline coefficient definitions.

pub mod error;
pub mod estimator;
pub mod expr;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod models;
pub mod reference;
pub mod rng;
pub mod rough_path;
pub mod sde;

pub use error::{Error, Result};
pub use estimator::{
    continuity_probe, evaluate_theta, ratio_estimate, refine_driver, ContinuityRow, RatioStats,
    TestFunction, ThetaEstimate, ThetaOptions,
};
pub use flow::{
    flow_forward, flow_inverse, flow_jacobian, flow_second_derivatives, transform_coefficients,
    CoeffBounds, CoeffFn, FlowField, TransformedCoefficients,
};
pub use reference::{
    example_closed_form, particle_filter_estimate, run_particle_ensemble,
    uncorrelated_robust_formula, ParticleEnsemble, PfEstimate,
};
pub use rough_path::{
    geodesic_interpolate, holder_distance, holder_seminorms, lift_piecewise_linear, EnhancedPath,
    HolderSeminorms,
};
pub use sde::{
    build_filter_system, simulate_observations, solve_rough_sde, stratonovich_drift_correction,
    DriftSpec, FilterModel, InitialLaw, ObservationRecord, RoughDriftSystem, RoughSdeSolver,
    SamplePath, SolveWorkspace,
};
