//! Contrastive target pretraining for semi-supervised learning, at desk scale.
//!
//! The crate covers the full pipeline: stochastic/differentiable augmentation
//! ([`augment`]), BYOL/InfoNCE target pretraining with an L2 anchor to the
//! pretrained weights ([`contrastive`]), semi-supervised finetuning with
//! FixMatch / Mean Teacher / CutMix learners ([`ssl`]), evaluation protocols
//! including Hungarian-matched cluster accuracy ([`eval`]), and the experiment
//! harness with dataset generation, checkpoints and the CLI ([`harness`]).
//!
//! Everything is CPU-only and deterministic given seeds; the small reverse-mode
//! tape in [`tensor`] is generic over `f32`/`f64` so gradient checks run in
//! double precision against the same code used for training.

pub mod augment;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod ssl;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
