//! Closed skew-normal (CSN) random fields on regular lattices.
//!
//! The crate covers density evaluation, simulation through block
//! Metropolis-Hastings on the latent truncated Gaussian field, Monte Carlo
//! maximum likelihood with common random numbers, and Bayesian prediction
//! under a linear-Gaussian observation model.
//!
//! Dense Gaussian algebra ([`gaussian`], [`linalg`]) and the orthant
//! estimator ([`orthant`]) are generic over the scalar type through [`Real`];
//! the samplers and estimators built on top run in `f64`, and the aliases
//! below name the `f64` instantiations they use.

pub mod error;
pub mod field;
pub mod gaussian;
pub mod inversion;
pub mod linalg;
pub mod mle;
pub mod optim;
pub mod orthant;
pub mod scalar;
pub mod trunc;

pub use error::{Error, Result};
pub use gaussian::GridSpec;
pub use linalg::Matrix;
pub use scalar::Real;

pub type Matrix64 = linalg::Matrix<f64>;
pub type CholFactor64 = gaussian::CholFactor<f64>;
pub type CorrelationMatrix64 = gaussian::CorrelationMatrix<f64>;
pub type KroneckerCov64 = gaussian::KroneckerCov<f64>;
