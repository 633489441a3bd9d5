//! Unrolled preconditioned proximal forward-backward splitting.
//!
//! Each stage takes a fidelity step `x − θ_k P(Ax − y)` with `P = Aᵀ`
//! (`pfbs-ir`) or `P = FBP` (`pfbs-air`), then subtracts a CNN residual
//! computed from every intermediate produced so far.

pub mod checkpoint;
mod model;
mod train;

pub use model::{ModelConfig, ModelGrads, PfbsMode, Preconditioner, StageTrace, UnrolledModel, NORM_ITERATIONS};
pub use train::{epoch_order, mean_psnr, EpochRecord, Trainer, TrainingConfig, TrainingPair};
