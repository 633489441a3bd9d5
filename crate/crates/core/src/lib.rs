//! Low-dose CT reconstruction toolkit.
//!
//! Fan-beam projector and FBP, a compound Poisson-Gaussian low-dose
//! simulator, a TV-ADMM baseline, and the unrolled preconditioned proximal
//! forward-backward splitting networks (`pfbs-ir` with `Aᵀ` as the
//! preconditioner, `pfbs-air` with FBP).

pub mod analytic;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod pfbs;
pub mod phantom;
pub mod projector;
pub mod tv;

pub use analytic::FbpOperator;
pub use error::{Error, Result};
pub use geometry::{FidelityWeights, Image, ImageShape, ScanGeometry, Sinogram, SinogramDomain};
pub use projector::Projector;
