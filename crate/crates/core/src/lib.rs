//! Null-space projected prompt tuning for a small prompted vision
//! transformer.
//!
//! Prompts of a frozen transformer are trained task after task. After each
//! task the per-layer matrices `Q_X W_kᵀ` and `S_P` are accumulated into
//! uncentered covariances, and later prompt updates are projected onto their
//! (approximate) null spaces so that the attention outputs of earlier tasks
//! stay put. A drift penalty on the prompt row statistics keeps LayerNorm
//! from undoing that guarantee.
//!
//! Modules:
//! - [`numeric`]: dense matrices, LayerNorm, softmax, symmetric eigensolver.
//! - [`vit`]: the prompted transformer, its gradients, and `J₁`/`J₂` extraction.
//! - [`projector`]: covariance accumulation, nullity rules, projectors.
//! - [`ln_constraint`]: prompt-distribution drift loss and shift identity.
//! - [`harness`]: synthetic task streams, training loop, metrics, experiments.
//! - [`config`], [`report`]: key=value run configs and CSV outputs.
//! - [`checks`]: the property suite behind `nsp2 check`.

pub mod checks;
pub mod config;
pub mod error;
pub mod harness;
pub mod ln_constraint;
pub mod numeric;
pub mod projector;
pub mod report;
pub mod rng;
pub mod vit;

pub use error::{Error, Result};
pub use numeric::{Matrix, RowStats, Spectrum};
pub use projector::{NullityMode, ProjectorConfig, ProjectorState};
pub use vit::{BackboneModel, ModelDims};
