//! Adaptive polytopic moving-horizon estimation.
//!
//! The estimator represents a nonlinear plant by a polytope of linear vertex
//! models and, at each sample, alternates between a state-estimation window
//! problem (mixing weights fixed) and a mixing-weight identification problem
//! (states fixed). Both windows carry arrival costs whose weights adapt with
//! a recursive, trace-capped update.
//!
//! All numerics are generic over [`Scalar`] (`f32`, `f64`); the `*64`
//! aliases below fix the common double-precision instantiation.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod arrival;
pub mod baselines;
pub mod mhe;
pub mod model;
pub mod scenarios;
pub mod scalar;
pub mod solver;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{NoiseSpec, NonlinearPlant, PolytopicModel, SimplexWeights, Trajectory};
pub use scalar::Scalar;
pub use solver::{QpSolution, QpStatus, QuadraticProgram, SolverOptions};

pub type Matrix64 = Matrix<f64>;
pub type PolytopicModel64 = PolytopicModel<f64>;
pub type SimplexWeights64 = SimplexWeights<f64>;
pub type QuadraticProgram64 = QuadraticProgram<f64>;
