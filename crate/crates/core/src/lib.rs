//! Two-family opinion dynamics with Lotka–Volterra interactions.
//!
//! The crate covers the whole chain from the exact N-particle Markov process
//! down to the one-dimensional diffusion that governs the conserved quantity
//! on the slow time scale:
//!
//! * [`model`] utilities, population split and the derived interaction functions
//! * [`microsim`] exact stochastic simulation, generator matrix, Poisson coupling
//! * [`macroode`] mean-field ODE, fixed points, Hamiltonians
//! * [`elliptic`] Legendre elliptic integrals and the Jacobi amplitude
//! * [`actionangle`] action-angle coordinates, angular speed and invariant measure
//! * [`sdelimit`] generator coefficients, averaged SDE, Euler–Maruyama, scale function
//! * [`harness`] experiments, two-sample statistics, config and output files

pub mod actionangle;
pub mod elliptic;
pub mod harness;
pub mod macroode;
pub mod microsim;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sdelimit;

pub use model::{validate, Family, PopulationSpec, UtilityFn, UtilitySpec, ValidatedModel};
