//! Personalized federated learning with a Bayesian shared representation.
//!
//! Clients share the hidden layer of a small MLP and keep their own output
//! layer. The server maintains a factorized Gaussian over the shared
//! parameters; each client fits a MAP estimate under it and returns a
//! full-covariance Laplace posterior restricted to the highest-variance
//! subnetwork. Predictions use the linearized network with a probit
//! approximation.
//!
//! The numerical modules ([`linalg`], [`model`], [`laplace`]) are generic over
//! [`scalar::Real`]; the experiment pipeline runs in `f64`.

pub mod cli;
pub mod config;
pub mod data;
pub mod federation;
pub mod laplace;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod seed;

pub use scalar::Real;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Cholesky = linalg::CholeskyFactor<f64>;
pub type Mlp = model::ClientModel<f64>;
pub type Prior = laplace::GaussianPrior<f64>;
pub type Posterior = laplace::SubnetPosterior<f64>;
