//! Particle-based approximate inference built on Stein's method.
//!
//! The crate covers plain and annealed SVGD, the gradient-free variant driven
//! by a surrogate density, Stein variational importance sampling with tracked
//! densities, kernelized Stein discrepancies (score-based, gradient-free and
//! alpha-weighted), black-box importance weights, sampling of discrete
//! distributions through a continuous parameterization, a goodness-of-fit
//! test for discrete models, and one-shot KL-averaging of local models.

pub mod aggregation;
pub mod discrete;
pub mod error;
pub mod gfsvgd;
pub mod gof;
pub mod kernels;
pub mod ksd;
pub mod mat;
pub mod models;
pub mod rng;
pub mod steinis;
pub mod svgd;

pub use error::{Result, SteinError};
pub use mat::Mat;
