//! Numerical engine for the unified Lagrangian–Hamiltonian formalism of
//! non-autonomous mechanics.
//!
//! Given a Lagrangian `L(t, q, v)`, regular or singular, the crate builds the
//! presymplectic system on the unified space `(t, q, v, p)`, discovers the
//! chain of constraint submanifolds by iterated tangency, resolves the
//! dynamical vector field on the final constraint set and integrates it.
//!
//! Fields are written once against [`Scalar`] and evaluated on floats or on
//! nested dual numbers; all derivatives are exact.

pub mod autodiff;
pub mod constraints;
pub mod error;
pub mod integrator;
pub mod lagrangian;
pub mod linalg;
pub mod models;
pub mod scalar;
pub mod unified;

pub use autodiff::{directional_derivative, jet2, Field, Jet2, SmoothScalarField};
pub use constraints::{
    run_constraint_algorithm, ConstraintChain, ConstraintFunction, GaugeRule, Provenance, Termination,
};
pub use error::{Error, Result};
pub use integrator::{integrate, IntegratorOptions, Projection, Scheme, Trajectory};
pub use lagrangian::LagrangianSystem;
pub use models::{builtin, semidiscrete_wave, wave_reference_constraints, ModelParams, WaveModelParams};
pub use scalar::{Dual, Real, Scalar, ScalarOps};
pub use unified::{UnifiedPoint, VectorFieldSolution};

/// Working precision of the engine.
pub type Float = f64;
/// Value, gradient and Hessian in working precision.
pub type Jet = Jet2<f64>;
/// First-order dual number in working precision.
pub type Dual64 = Dual<f64>;
/// First-order dual number in single precision.
pub type Dual32 = Dual<f32>;
